"""JSON configuration schema shared by every command.

Validation reports the dotted path of each offending field so config errors
point at exactly one line of the file.  Every run writes the fully resolved
config (defaults filled in) next to its outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


class ConfigError(ValueError):
    """A configuration file violated the schema."""


@dataclass
class MeshConfig:
    nx: int = 17
    ny: int = 17


@dataclass
class PhysicsConfig:
    model: str = "linear"          # "linear" | "neohookean"
    nu: float = 0.45
    traction: float = 0.1


@dataclass
class DataConfig:
    grid_n: int = 17
    snr_db: float = 30.0
    seed: int = 0
    mesh_refine: int = 2
    noiseless: bool = False


@dataclass
class BcsConfig:
    dirichlet: str = "given"       # "given" | "none"


@dataclass
class PriorConfig:
    a0: float = 1e-8
    b0: float = 1e-8
    y_variance: float = 1e16
    gaussian_sigma: float = None   # set to replace the jump prior (comparison mode)


@dataclass
class PosteriorConfig:
    rank_x: int = 10
    rank_y: int = 10
    hidden_width: int = 128


@dataclass
class WeightsConfig:
    N: int = 4096
    r_max: float = 0.15
    seed: int = 0


@dataclass
class TrainSection:
    lam: float = 1e7
    tau_from_data: bool = True
    tau: float = None
    K: int = 200
    L: int = 10
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    iters_phase1: int = 5000
    iters_phase2: int = 20000
    seed: int = 0
    log_every: int = 100
    early_stop_rel: float = 0.0


@dataclass
class Config:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bcs: BcsConfig = field(default_factory=BcsConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    posterior: PosteriorConfig = field(default_factory=PosteriorConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    train: TrainSection = field(default_factory=TrainSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


_SECTIONS = {
    "mesh": MeshConfig,
    "physics": PhysicsConfig,
    "data": DataConfig,
    "bcs": BcsConfig,
    "prior": PriorConfig,
    "posterior": PosteriorConfig,
    "weights": WeightsConfig,
    "train": TrainSection,
}

_REQUIRED = {
    "mesh": ("nx", "ny"),
    "physics": ("model", "nu"),
    "data": ("grid_n", "snr_db", "seed"),
}

_CHECKS = [
    ("mesh.nx", lambda c: c.mesh.nx >= 2, "must be >= 2"),
    ("mesh.ny", lambda c: c.mesh.ny >= 2, "must be >= 2"),
    ("physics.model", lambda c: c.physics.model in ("linear", "neohookean"),
     "must be 'linear' or 'neohookean'"),
    ("physics.nu", lambda c: 0.0 <= c.physics.nu < 0.5, "must satisfy 0 <= nu < 0.5"),
    ("data.grid_n", lambda c: c.data.grid_n >= 2, "must be >= 2"),
    ("data.mesh_refine", lambda c: c.data.mesh_refine >= 1, "must be >= 1"),
    ("bcs.dirichlet", lambda c: c.bcs.dirichlet in ("given", "none"),
     "must be 'given' or 'none'"),
    ("prior.a0", lambda c: c.prior.a0 > 0, "must be positive"),
    ("prior.b0", lambda c: c.prior.b0 > 0, "must be positive"),
    ("prior.y_variance", lambda c: c.prior.y_variance > 0, "must be positive"),
    ("posterior.rank_x", lambda c: c.posterior.rank_x >= 1, "must be >= 1"),
    ("posterior.rank_y", lambda c: c.posterior.rank_y >= 1, "must be >= 1"),
    ("posterior.hidden_width", lambda c: c.posterior.hidden_width >= 1, "must be >= 1"),
    ("weights.N", lambda c: c.weights.N >= 1, "must be >= 1"),
    ("weights.r_max", lambda c: c.weights.r_max > 0, "must be positive"),
    ("train.lam", lambda c: c.train.lam >= 0, "must be >= 0"),
    ("train.K", lambda c: 1 <= c.train.K <= c.weights.N, "must satisfy 1 <= K <= weights.N"),
    ("train.L", lambda c: c.train.L >= 1, "must be >= 1"),
    ("train.lr", lambda c: c.train.lr > 0, "must be positive"),
    ("train.iters_phase1", lambda c: c.train.iters_phase1 >= 0, "must be >= 0"),
    ("train.iters_phase2", lambda c: c.train.iters_phase2 >= 0, "must be >= 0"),
]


def config_from_dict(raw: dict, require: bool = True) -> Config:
    """Build a validated Config; unknown or missing fields raise ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section_raw = raw.get(name, {})
        if not isinstance(section_raw, dict):
            raise ConfigError(f"section '{name}' must be a JSON object")
        fields = {f for f in cls.__dataclass_fields__}
        bad = set(section_raw) - fields
        if bad:
            raise ConfigError(f"unknown field(s) in '{name}': "
                              + ", ".join(f"{name}.{b}" for b in sorted(bad)))
        if require:
            for f in _REQUIRED.get(name, ()):
                if f not in section_raw:
                    raise ConfigError(f"missing required field '{name}.{f}'")
        try:
            kwargs[name] = cls(**section_raw)
        except TypeError as exc:
            raise ConfigError(f"section '{name}': {exc}") from exc
    cfg = Config(**kwargs)
    for path, check, msg in _CHECKS:
        try:
            ok = check(cfg)
        except TypeError as exc:
            raise ConfigError(f"field '{path}': {exc}") from exc
        if not ok:
            raise ConfigError(f"field '{path}' {msg}")
    return cfg


def load_config(path: str) -> Config:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def write_resolved(cfg: Config, path: str):
    with open(path, "w") as fh:
        fh.write(cfg.to_json())
        fh.write("\n")
