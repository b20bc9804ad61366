"""Binary checkpoint format: magic + version, JSON metadata, named arrays.

Layout (all integers little-endian):

    bytes 0..15   magic  b"ELASTOVI-CKPT\\x00\\x00\\x00"
    uint32        format version (currently 1)
    uint64        metadata length, then that many bytes of UTF-8 JSON
    uint32        array count
    per array:    uint16 name length, name bytes, uint8 ndim,
                  ndim * uint64 shape, float64 data

Arrays are written in sorted name order and the metadata JSON with sorted
keys, so save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import priors as pr
from .elbo import VariationalParams
from .trainer import Checkpoint, CostCounter, TraceRow

MAGIC = b"ELASTOVI-CKPT\x00\x00\x00"
VERSION = 1


class CheckpointError(RuntimeError):
    """Missing or corrupt checkpoint file."""


def _write_array(fh, name: str, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _read_array(fh):
    (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, data.copy()


def save_checkpoint(ckpt: Checkpoint, path: str):
    meta = {
        "config": ckpt.config,
        "counters": {"residual_evals": ckpt.counter.residual_evals},
        "gamma": {"a0": ckpt.jump.a0, "b0": ckpt.jump.b0},
        "dirichlet_given": ckpt.dirichlet_given,
        "aborted": ckpt.aborted,
        "n_mlp_layers": len(ckpt.params.mlp_params) // 2,
    }
    arrays = dict(zip(ckpt.params.names(), ckpt.params.all_arrays()))
    arrays["gamma_a"] = ckpt.jump.a_theta
    arrays["gamma_b"] = ckpt.jump.b_theta
    if ckpt.trace:
        arrays["trace"] = np.array(
            [[r.iteration, r.phase, r.elbo, r.r2_heldout, r.residual_evals]
             for r in ckpt.trace])
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            _write_array(fh, name, arrays[name])


def load_checkpoint(path: str) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    with fh:
        if _read_exact(fh, 16) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", _read_exact(fh, 8))
        meta = json.loads(_read_exact(fh, mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = dict(_read_array(fh) for _ in range(count))

    n_layers = int(meta["n_mlp_layers"])
    mlp_params = []
    for i in range(n_layers):
        mlp_params.extend([arrays[f"mlp_w{i}"], arrays[f"mlp_b{i}"]])
    params = VariationalParams(mu_y=arrays["mu_y"], factor_y=arrays["factor_y"],
                               rho_y=arrays["rho_y"], mlp_params=mlp_params,
                               factor_x=arrays["factor_x"], rho_x=arrays["rho_x"])
    trace = []
    if "trace" in arrays:
        for row in arrays["trace"]:
            trace.append(TraceRow(int(row[0]), int(row[1]), row[2], row[3], int(row[4])))
    # the jump operator is rebuilt from config when needed; only (a, b) persist
    jump = pr.JumpPrior.__new__(pr.JumpPrior)
    jump.B = None
    jump.a0 = meta["gamma"]["a0"]
    jump.b0 = meta["gamma"]["b0"]
    jump.a_theta = arrays["gamma_a"]
    jump.b_theta = arrays["gamma_b"]
    counter = CostCounter(residual_evals=int(meta["counters"]["residual_evals"]))
    return Checkpoint(config=meta["config"], params=params, jump=jump,
                      counter=counter, trace=trace,
                      dirichlet_given=bool(meta["dirichlet_given"]),
                      aborted=bool(meta["aborted"]))
