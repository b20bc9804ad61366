"""Command-line surface: generate, train, estimate, baseline, report.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 a baseline was asked to solve an ill-posed forward problem.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import baselines as bl
from . import datagen as dg
from . import estimator as est
from . import plotting
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load_config, write_resolved
from .elbo import ElboModel, observation_operator
from .fem import SingularSystemError
from .mesh import build_structured_mesh, jump_operator
from .priors import JumpPrior
from .residual import (DIRICHLET_SEGMENTS, ResidualOperator, ResidualProblem,
                       generate_weight_functions)
from .trainer import (CostCounter, TrainConfig, build_elbo_model, initial_params,
                      train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ILL_POSED = 4


def problem_from_config(cfg: Config) -> ResidualProblem:
    mesh = build_structured_mesh(cfg.mesh.nx, cfg.mesh.ny)
    tractions = {"bot": np.array([0.0, -cfg.physics.traction]),
                 "right": np.array([cfg.physics.traction, 0.0])}
    return ResidualProblem(mesh=mesh, law=cfg.physics.model, nu=cfg.physics.nu,
                           tractions=tractions,
                           dirichlet_segments=DIRICHLET_SEGMENTS)


def weights_from_config(cfg: Config, mesh):
    return generate_weight_functions(mesh, cfg.weights.N, cfg.weights.r_max,
                                     cfg.weights.seed)


def model_from_config(cfg: Config, dataset):
    problem = problem_from_config(cfg)
    weights = weights_from_config(cfg, problem.mesh)
    if not cfg.train.tau_from_data and cfg.train.tau is not None:
        dataset.tau = float(cfg.train.tau)
    model = build_elbo_model(problem, dataset, weights,
                             y_variance=cfg.prior.y_variance,
                             a0=cfg.prior.a0, b0=cfg.prior.b0,
                             dirichlet_given=cfg.bcs.dirichlet == "given",
                             x_prior_sigma=cfg.prior.gaussian_sigma)
    return model, problem, weights


def sampling_model(cfg: Config, jump: JumpPrior = None) -> ElboModel:
    """Model carrying just enough structure to sample the posterior."""
    problem = problem_from_config(cfg)
    dummy = type("D", (), {})()
    dummy.obs_points = np.zeros((0, 2))
    dummy.u_hat = np.zeros(0)
    dummy.tau = 1.0
    model = build_elbo_model(problem, dummy, [],
                             y_variance=cfg.prior.y_variance,
                             a0=cfg.prior.a0, b0=cfg.prior.b0,
                             dirichlet_given=cfg.bcs.dirichlet == "given",
                             x_prior_sigma=cfg.prior.gaussian_sigma)
    if jump is not None and jump.a_theta is not None:
        model.jump.a_theta = jump.a_theta
        model.jump.b_theta = jump.b_theta
    return model


def _write_resolved_next_to(cfg: Config, out_path: str):
    write_resolved(cfg, _sibling(out_path, "resolved_config.json"))


def _sibling(out_path: str, name: str) -> str:
    d = os.path.dirname(os.path.abspath(out_path))
    return os.path.join(d, name)


# -- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    problem = problem_from_config(cfg)
    ds = dg.make_dataset(problem, cfg.data.grid_n, cfg.data.snr_db, cfg.data.seed,
                         refine=cfg.data.mesh_refine, noiseless=cfg.data.noiseless)
    with open(args.out, "w") as fh:
        fh.write(dg.dataset_to_json(ds))
        fh.write("\n")
    _write_resolved_next_to(cfg, args.out)
    print(f"dataset written to {args.out} "
          f"({ds.obs_points.shape[0]} points, tau={ds.tau:.6g})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    with open(args.data) as fh:
        dataset = dg.dataset_from_json(fh.read())
    model, problem, _ = model_from_config(cfg, dataset)
    params = initial_params(model, d_x=problem.mesh.n_elements,
                            hidden=cfg.posterior.hidden_width,
                            rank_x=cfg.posterior.rank_x,
                            rank_y=cfg.posterior.rank_y,
                            seed=cfg.train.seed)
    tc = TrainConfig(lam=cfg.train.lam, K=cfg.train.K, L=cfg.train.L,
                     lr=cfg.train.lr, beta1=cfg.train.beta1, beta2=cfg.train.beta2,
                     iters_phase1=cfg.train.iters_phase1,
                     iters_phase2=cfg.train.iters_phase2,
                     seed=cfg.train.seed, log_every=cfg.train.log_every,
                     early_stop_rel=cfg.train.early_stop_rel)
    ckpt = train(model, params, tc, trace_path=args.trace)
    ckpt.config = cfg.to_dict()
    save_checkpoint(ckpt, args.out)
    _write_resolved_next_to(cfg, args.out)
    status = "ABORTED (non-finite objective)" if ckpt.aborted else "done"
    print(f"training {status}: {ckpt.counter.residual_evals} residual evaluations, "
          f"checkpoint at {args.out}")
    if ckpt.aborted:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_estimate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = _config_from_checkpoint(ckpt)
    model = sampling_model(cfg, ckpt.jump)
    pts = model.problem.mesh.centroids()
    samples = est.posterior_field_samples(model, ckpt.params, pts, args.samples,
                                          args.seed)
    summary = est.summarize(samples)
    est.write_posterior_csv(args.out, pts, summary)
    diag_pts = est.diagonal_points()
    diag = est.summarize(est.posterior_field_samples(model, ckpt.params, diag_pts,
                                                     args.samples, args.seed))
    est.write_diagonal_csv(_sibling(args.out, "diagonal.csv"), diag_pts, diag,
                           truth=dg.ground_truth_field(diag_pts))
    _write_resolved_next_to(cfg, args.out)
    print(f"posterior summaries for {pts.shape[0]} elements written to {args.out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = load_config(args.config)
    if cfg.bcs.dirichlet == "none":
        print("error: ill-posed forward problem: black-box baselines need "
              "Dirichlet boundary conditions", file=sys.stderr)
        return EXIT_ILL_POSED
    with open(args.data) as fh:
        dataset = dg.dataset_from_json(fh.read())
    problem = problem_from_config(cfg)
    sigma = cfg.prior.gaussian_sigma if cfg.prior.gaussian_sigma else 2.0
    counter = CostCounter()
    equiv = (bl.HMC_EQUIV_PER_SOLVE if args.method == "hmc"
             else bl.SVI_EQUIV_PER_SOLVE)
    log_post = bl.BlackboxPosterior(problem, dataset, prior_sigma=sigma,
                                    counter=counter, equiv_per_solve=equiv)
    x0 = np.zeros(problem.mesh.n_elements)
    if args.method == "hmc":
        res = bl.hmc_sample(log_post, x0, steps=args.steps,
                            leapfrog_steps=args.leapfrog, seed=args.seed)
        bl.write_chain_csv(args.out, res.chain)
        summary = {
            "method": "hmc",
            "accept_rate": res.accept_rate,
            "step_size": res.step_size,
            "n_divergent": res.n_divergent,
            "n_solves": log_post.n_solves,
            "residual_equivalents": counter.residual_evals,
            "ess_min": float(np.min(bl.effective_sample_size(res.chain))),
            "posterior_mean": res.chain.mean(axis=0).tolist(),
        }
    else:
        q = bl.blackbox_svi(log_post, x0, iters=args.steps, lr=args.lr,
                            seed=args.seed)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mu", "sigma"])
            for mu, sd in zip(q.mu, q.sigma):
                w.writerow([repr(mu), repr(sd)])
        summary = {
            "method": "svi",
            "n_solves": log_post.n_solves,
            "residual_equivalents": counter.residual_evals,
            "posterior_mean": q.mu.tolist(),
        }
    with open(_sibling(args.out, f"{args.method}_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_resolved_next_to(cfg, args.out)
    print(f"{args.method} baseline done: {log_post.n_solves} forward solves, "
          f"{counter.residual_evals} residual equivalents")
    return EXIT_OK


def cmd_report(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = _config_from_checkpoint(ckpt)
    with open(args.data) as fh:
        dataset = dg.dataset_from_json(fh.read())
    os.makedirs(args.out, exist_ok=True)
    model = sampling_model(cfg, ckpt.jump)
    mesh = model.problem.mesh
    out = lambda name: os.path.join(args.out, name)

    # training trace
    with open(out("elbo_trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "phase", "elbo", "r2_heldout", "residual_evals"])
        for r in ckpt.trace:
            w.writerow([r.iteration, r.phase, repr(r.elbo), repr(r.r2_heldout),
                        r.residual_evals])
    if ckpt.trace:
        plotting.plot_trace(ckpt.trace, out("elbo_trace.png"))

    # material field summaries at element centroids
    pts = mesh.centroids()
    samples = est.posterior_field_samples(model, ckpt.params, pts, args.samples,
                                          args.seed)
    summary = est.summarize(samples)
    est.write_posterior_csv(out("posterior.csv"), pts, summary)
    truth = dg.ground_truth_field(pts)
    plotting.plot_field_maps(mesh, summary.mean, np.sqrt(summary.variance),
                             out("field_mean_std.png"))

    diag_pts = est.diagonal_points()
    diag = est.summarize(est.posterior_field_samples(model, ckpt.params, diag_pts,
                                                     args.samples, args.seed))
    diag_truth = dg.ground_truth_field(diag_pts)
    est.write_diagonal_csv(out("diagonal.csv"), diag_pts, diag, truth=diag_truth)
    plotting.plot_diagonal(diag_pts, diag, diag_truth, out("diagonal.png"))

    # displacement field summaries
    y_samples = est.posterior_displacement_samples(model, ckpt.params,
                                                   args.samples, args.seed)
    y_summary = est.summarize(y_samples)
    plotting.plot_displacement_maps(mesh, y_summary.mean,
                                    np.sqrt(y_summary.variance),
                                    out("displacement_fields.png"))

    # boundary slices along the essential boundaries
    slices = _boundary_slices(model, y_summary, dataset)
    _write_boundary_csv(out("boundary_slices.csv"), slices)
    plotting.plot_boundary_slices(slices, out("boundary_slices.png"))

    coverage = float(np.mean((truth >= summary.q025) & (truth <= summary.q975)))
    metrics = {
        "rmse_vs_truth": float(np.sqrt(np.mean((summary.mean - truth) ** 2))),
        "ci95_coverage": coverage,
        "residual_evals": ckpt.counter.residual_evals,
        "aborted": ckpt.aborted,
        "samples": args.samples,
    }
    with open(out("metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_resolved_next_to(cfg, out("metrics.json"))
    print(f"report written to {args.out} "
          f"(rmse={metrics['rmse_vs_truth']:.4f}, coverage={coverage:.3f})")
    return EXIT_OK


def _boundary_slices(model, y_summary, dataset):
    mesh = model.problem.mesh
    slices = {}
    for segment in model.problem.dirichlet_segments:
        nodes = mesh.segment_nodes(segment)
        pts = mesh.nodes[nodes]
        axis = 0 if segment in ("bot", "top") else 1
        order = np.argsort(pts[:, axis])
        nodes = nodes[order]
        s = mesh.nodes[nodes][:, axis]
        data = {"s": s, "nodes": nodes,
                "coords": mesh.nodes[nodes],
                "mean": [y_summary.mean[2 * nodes + c] for c in (0, 1)],
                "q025": [y_summary.q025[2 * nodes + c] for c in (0, 1)],
                "q975": [y_summary.q975[2 * nodes + c] for c in (0, 1)]}
        if dataset.u_ref_nodes is not None:
            data["truth"] = [dataset.u_ref_nodes[2 * nodes + c] for c in (0, 1)]
        slices[segment] = data
    return slices


def _write_boundary_csv(path, slices):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", "s1", "s2", "u1_mean", "u1_q025", "u1_q975",
                    "u2_mean", "u2_q025", "u2_q975", "u1_true", "u2_true"])
        for segment, d in sorted(slices.items()):
            truth = d.get("truth")
            for i in range(d["s"].size):
                row = [segment, repr(d["coords"][i, 0]), repr(d["coords"][i, 1])]
                for c in (0, 1):
                    row += [repr(d["mean"][c][i]), repr(d["q025"][c][i]),
                            repr(d["q975"][c][i])]
                if truth is not None:
                    row += [repr(truth[0][i]), repr(truth[1][i])]
                else:
                    row += ["", ""]
                w.writerow(row)


def _config_from_checkpoint(ckpt) -> Config:
    from .config import config_from_dict

    if not ckpt.config:
        raise CheckpointError("checkpoint carries no configuration")
    return config_from_dict(ckpt.config, require=False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastovi",
                                description="Material-field inversion from "
                                            "displacement data via weighted "
                                            "PDE residuals")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="run two-phase variational training")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--trace", default=None, help="CSV path for the progress log")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("estimate", help="posterior summaries from a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--samples", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_estimate)

    b = sub.add_parser("baseline", help="black-box HMC or SVI baseline")
    b.add_argument("--method", choices=("hmc", "svi"), required=True)
    b.add_argument("--config", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--steps", type=int, default=2000)
    b.add_argument("--leapfrog", type=int, default=10)
    b.add_argument("--lr", type=float, default=0.05)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_baseline)

    r = sub.add_parser("report", help="figures, CSVs and metrics from a run")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--samples", type=int, default=1000)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SingularSystemError as exc:
        print(f"error: ill-posed forward problem: {exc}", file=sys.stderr)
        return EXIT_ILL_POSED
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
