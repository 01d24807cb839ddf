"""Command-line entry point: ``scd <subcommand> ...``.

Exit status is 0 on success, 1 on runtime errors and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from ._io import read_json
from .errors import SCDError
from .estimator import EstimatorConfig, fit_all_nodes, load_estimate, save_estimate
from .experiment import (DEFAULT_FRACTIONS, ExperimentConfig, run_experiment, stress_misspec,
                         threshold_sweep, write_stress_csv, write_sweep_csv)
from .graph_model import (AdjacencyPattern, binarize, generate_er_dag, generate_loop_graph,
                          load_graph, save_graph)
from .metrics import evaluate, save_metrics
from .sde_engine import AffineDrift, SimulationConfig, load_drift, load_trajectory, save_drift, save_trajectory, simulate


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _log(**kv):
    print("resolved: " + json.dumps(kv, default=str, sort_keys=True), file=sys.stderr)


def cmd_gen_graph(args):
    kind = args.kind.replace("-", "_")
    _log(command="gen-graph", kind=kind, p=args.p, seed=args.seed, degree=args.degree,
         w_min=args.w_min, w_max=args.w_max)
    if kind == "er_dag":
        deg = args.degree if args.degree is not None else -(-args.p // 2)
        g = generate_er_dag(args.p, deg, (args.w_min, args.w_max), seed=args.seed)
    else:
        g = generate_loop_graph(args.p, args.w_min, args.w_max, seed=args.seed)
    save_graph(g, args.out)


def cmd_gen_drift(args):
    rng = np.random.default_rng(args.seed)
    lo, hi = args.diag_range
    B = np.diag(rng.uniform(lo, hi, size=args.p))
    _log(command="gen-drift", p=args.p, seed=args.seed, diag_range=[lo, hi])
    save_drift(AffineDrift(B), args.out)


def cmd_simulate(args):
    graph = load_graph(args.graph)
    drift = load_drift(args.drift)
    cfg = SimulationConfig(args.t_start, args.t_end, args.steps, args.x0, args.seed)
    _log(command="simulate", t_start=cfg.t_start, t_end=cfg.t_end, n_steps=cfg.n_steps,
         x0=cfg.x0 or "ones", seed=cfg.seed)
    traj = simulate(drift, graph, cfg)
    if traj.diverged:
        print("warning: trajectory exceeded the overflow guard (diverged)", file=sys.stderr)
    save_trajectory(traj, args.out)


def cmd_fit(args):
    traj = load_trajectory(args.traj)
    drift = load_drift(args.drift) if args.drift else AffineDrift.zeros(traj.p)
    cfg = EstimatorConfig(c=args.c, lam=args.lam, threshold=args.threshold,
                          allow_diagonal=not args.no_diagonal, restarts=args.restarts,
                          penalty_scale=args.penalty_scale, seed=args.seed)
    _log(command="fit", estimator=cfg.to_dict())
    save_estimate(fit_all_nodes(traj, drift, cfg), args.out)


def _estimated_pattern(path):
    """Pattern from an estimate JSON, or the nonzero pattern of a graph JSON."""
    if "weights" in read_json(path):
        return binarize(load_graph(path), 0.0), 0.0
    _, threshold, pattern, _ = load_estimate(path)
    return AdjacencyPattern(pattern), threshold


def cmd_eval(args):
    est, threshold = _estimated_pattern(args.est)
    truth = load_graph(args.truth)
    _log(command="eval", threshold=threshold, diagonal_policy=args.diagonal_policy,
         reversal_policy=args.reversal_policy, truth_seed=truth.seed)
    rep = evaluate(est, binarize(truth, 0.0), args.diagonal_policy, args.reversal_policy)
    if args.out:
        save_metrics(rep, args.out)
    print(json.dumps(rep.to_dict()))


def _experiment_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    over = {}
    if getattr(args, "runs", None) is not None:
        over["runs"] = args.runs
    if getattr(args, "base_seed", None) is not None:
        over["base_seed"] = args.base_seed
    return cfg.updated(**over) if over else cfg


def cmd_experiment(args):
    cfg = _experiment_config(args)
    grid = args.lambda_grid or [cfg.estimator.lam]
    _log(command="experiment", config=cfg.to_dict(), lambda_grid=grid)
    rows = []
    for lam in grid:
        c = cfg.updated(estimator={"lambda": lam})
        sub = None if args.artifacts is None else Path(args.artifacts) / f"lambda_{lam:g}"
        res = run_experiment(c, out_dir=sub, workers=args.workers)
        for r in res.records:
            if not r.ok:
                print(f"run {r.index} (seed {r.seed}) failed: {r.error}", file=sys.stderr)
        for s in res.aggregate.rows:
            rows.append((lam, s))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        if args.lambda_grid:
            w.writerow(["lambda", "metric", "mean", "std", "n"])
            for lam, s in rows:
                w.writerow([repr(float(lam)), s.metric, repr(s.mean), repr(s.std), s.n])
        else:
            w.writerow(["metric", "mean", "std", "n"])
            for _, s in rows:
                w.writerow([s.metric, repr(s.mean), repr(s.std), s.n])


def cmd_stress(args):
    cfg = _experiment_config(args)
    fractions = args.fractions or list(DEFAULT_FRACTIONS)
    _log(command="stress", config=cfg.to_dict(), fractions=fractions)
    rows = stress_misspec(cfg, fractions, workers=args.workers)
    if args.out:
        write_stress_csv(rows, args.out)
    for r in rows:
        print(f"{r.miss_fraction:.2f}  SHD {r.shd[0]:.3f} +- {r.shd[1]:.3f}  "
              f"FDR {r.fdr[0]:.3f} +- {r.fdr[1]:.3f}  TPR {r.tpr[0]:.3f} +- {r.tpr[1]:.3f}")


def cmd_sweep(args):
    A, _, _, _ = load_estimate(args.est)
    truth = load_graph(args.truth)
    _log(command="sweep", grid=args.grid)
    rows = threshold_sweep(A, truth, args.grid, args.diagonal_policy, args.reversal_policy)
    write_sweep_csv(rows, args.out)


def build_parser():
    ap = argparse.ArgumentParser(prog="scd", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-graph", help="sample a ground-truth graph")
    g.add_argument("--kind", choices=["er-dag", "er_dag", "loop"], default="er-dag")
    g.add_argument("--p", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--degree", type=float)
    g.add_argument("--w-min", type=float, default=0.3)
    g.add_argument("--w-max", type=float, default=1.3)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_graph)

    d = sub.add_parser("gen-drift", help="write a diagonal self-loop drift")
    d.add_argument("--p", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--diag-range", type=_floats, default=[-0.5, 0.0])
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_gen_drift)

    s = sub.add_parser("simulate", help="Euler-Maruyama trajectory to CSV")
    s.add_argument("--graph", required=True)
    s.add_argument("--drift", required=True)
    s.add_argument("--t-start", type=float, default=0.0)
    s.add_argument("--t-end", type=float, default=5.0)
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--x0", type=_floats)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="estimate the coupling matrix")
    f.add_argument("--traj", required=True)
    f.add_argument("--drift")
    f.add_argument("--c", type=float, default=0.1)
    f.add_argument("--lambda", dest="lam", type=float, default=5.0)
    f.add_argument("--threshold", type=float, default=0.22)
    f.add_argument("--restarts", type=int, default=EstimatorConfig.restarts)
    f.add_argument("--penalty-scale", choices=["total", "per_sample"], default="total")
    f.add_argument("--no-diagonal", action="store_true")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score an estimate (or a graph) against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--diagonal-policy", choices=["exclude", "include"], default="exclude")
    e.add_argument("--reversal-policy", choices=["as_one", "as_two"], default="as_one")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="seeded multi-run experiment")
    x.add_argument("--config")
    x.add_argument("--runs", type=int)
    x.add_argument("--base-seed", type=int)
    x.add_argument("--lambda-grid", type=_floats)
    x.add_argument("--artifacts")
    x.add_argument("--workers", type=int)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)

    m = sub.add_parser("stress", help="drift misspecification stress test")
    m.add_argument("--config")
    m.add_argument("--runs", type=int)
    m.add_argument("--base-seed", type=int)
    m.add_argument("--fractions", type=_floats)
    m.add_argument("--workers", type=int)
    m.add_argument("--out")
    m.set_defaults(func=cmd_stress)

    w = sub.add_parser("sweep", help="score an estimate over a threshold grid")
    w.add_argument("--est", required=True)
    w.add_argument("--truth", required=True)
    w.add_argument("--grid", type=_floats, required=True)
    w.add_argument("--diagonal-policy", choices=["exclude", "include"], default="exclude")
    w.add_argument("--reversal-policy", choices=["as_one", "as_two"], default="as_one")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (SCDError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
