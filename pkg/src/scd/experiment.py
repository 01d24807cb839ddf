"""Seeded end-to-end experiments: generate -> simulate -> fit -> score -> aggregate."""
from __future__ import annotations

import copy
import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import read_json
from .errors import ParameterError, SCDError
from .estimator import EstimatorConfig, fit_all_nodes, fit_drift, save_estimate
from .graph_model import (WeightedDigraph, binarize, check_stability, generate_er_dag,
                          generate_loop_graph, save_graph)
from .metrics import AggregateReport, MetricsReport, aggregate, evaluate, save_metrics, write_aggregate_csv
from .sde_engine import AffineDrift, SimulationConfig, save_drift, save_trajectory, simulate

DRIFT_MODES = ("self_loops_uniform", "interaction_block", "custom")
X0_MODES = ("ones", "uniform", "fixed")
DEFAULT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)

DEFAULTS = {
    "graph": {
        "kind": "er_dag",
        "p": 5,
        "degree": None,  # None -> ceil(p / 2)
        "weight_range": [0.3, 1.3],
        "w_min": 0.3,
        "w_max": 1.3,
        "self_noise_range": None,
    },
    "drift": {
        "mode": "self_loops_uniform",
        "diag_weight_range": None,  # None -> per-family default below
        "unstable_drop_count": 0,
        "block_offdiag_range": [0.3, 1.3],
        "require_stable": False,
        "max_resample": 100,
        "custom": None,
    },
    "sim": {
        "t_start": 0.0,
        "t_end": 5.0,
        "n_steps": 500,
        "x0_mode": "uniform",
        "x0_range": [0.5, 1.5],
        "x0": None,
    },
    "estimator": {},
    "metrics": {"diagonal_policy": "exclude", "reversal_policy": "as_one"},
    "runs": 10,
    "base_seed": 0,
    "learn_drift": False,
    "misspec": {"miss_fraction": 0.0, "epsilon": None, "fractions": list(DEFAULT_FRACTIONS)},
}

# drift diagonal ranges per graph family (see README for the calibration notes)
FAMILY_DIAG_RANGE = {"er_dag": (-0.5, 0.0), "loop": (-1.0, -0.5), "custom": (-2.0, -1.0)}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "custom":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Nested experiment settings; every field has a default.

    Build one from a (possibly minimal) dict with :meth:`from_dict`, e.g.
    ``ExperimentConfig.from_dict({"graph": {"kind": "loop", "p": 5}})``.
    """

    graph: dict
    drift: dict
    sim: dict
    estimator: EstimatorConfig
    metrics: dict
    runs: int
    base_seed: int
    learn_drift: bool
    misspec: dict

    @classmethod
    def from_dict(cls, d=None):
        d = dict(d or {})
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ParameterError(f"unknown experiment fields: {sorted(unknown)}")
        m = _merge(DEFAULTS, d)
        est = EstimatorConfig.from_dict(m["estimator"])
        cfg = cls(m["graph"], m["drift"], m["sim"], est, m["metrics"], int(m["runs"]),
                  int(m["base_seed"]), bool(m["learn_drift"]), m["misspec"])
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))

    def to_dict(self):
        return {
            "graph": copy.deepcopy(self.graph),
            "drift": copy.deepcopy(self.drift),
            "sim": copy.deepcopy(self.sim),
            "estimator": self.estimator.to_dict(),
            "metrics": dict(self.metrics),
            "runs": self.runs,
            "base_seed": self.base_seed,
            "learn_drift": self.learn_drift,
            "misspec": copy.deepcopy(self.misspec),
        }

    def updated(self, **sections):
        d = self.to_dict()
        for k, v in sections.items():
            d[k] = _merge(d[k], v) if isinstance(v, dict) and isinstance(d.get(k), dict) else v
        return ExperimentConfig.from_dict(d)

    def validate(self):
        g, dr, sim, ms = self.graph, self.drift, self.sim, self.misspec
        if g["kind"] not in ("er_dag", "loop"):
            raise ParameterError(f"graph kind must be er_dag or loop, got {g['kind']!r}")
        if int(g["p"]) < (3 if g["kind"] == "loop" else 1):
            raise ParameterError(f"p={g['p']} too small for {g['kind']}")
        if dr["mode"] not in DRIFT_MODES:
            raise ParameterError(f"drift mode must be one of {DRIFT_MODES}")
        if dr["mode"] == "custom" and dr.get("custom") is None:
            raise ParameterError("custom drift mode needs drift.custom")
        if dr["mode"] == "interaction_block" and int(g["p"]) < 2:
            raise ParameterError("interaction_block needs p >= 2")
        if not 0 <= int(dr["unstable_drop_count"]) <= int(g["p"]):
            raise ParameterError("unstable_drop_count must lie in [0, p]")
        if sim["x0_mode"] not in X0_MODES:
            raise ParameterError(f"x0_mode must be one of {X0_MODES}")
        if sim["x0_mode"] == "fixed" and sim.get("x0") is None:
            raise ParameterError("x0_mode='fixed' needs sim.x0")
        SimulationConfig(sim["t_start"], sim["t_end"], sim["n_steps"])
        if self.runs < 1:
            raise ParameterError("runs must be >= 1")
        if not 0 <= float(ms["miss_fraction"]) <= 1:
            raise ParameterError("miss_fraction must lie in [0, 1]")
        eps = ms.get("epsilon")
        if eps is not None and eps < 0:
            raise ParameterError("epsilon must be nonnegative")
        for f in ms.get("fractions") or ():
            if not 0 <= f <= 1:
                raise ParameterError(f"fraction {f} outside [0, 1]")

    def diag_range(self):
        r = self.drift.get("diag_weight_range")
        return tuple(r) if r is not None else FAMILY_DIAG_RANGE[self.graph["kind"]]


@dataclass
class RunRecord:
    index: int
    seed: int
    metrics: MetricsReport | None = None
    diverged: bool = False
    stability_margin: float = math.nan
    second_moment_abscissa: float = math.nan
    timing: dict = field(default_factory=dict)
    graph_path: Path | None = None
    drift_path: Path | None = None
    trajectory_path: Path | None = None
    estimate_path: Path | None = None
    metrics_path: Path | None = None
    error: str | None = None
    misspecified_entries: int = 0

    @property
    def ok(self) -> bool:
        return self.error is None and self.metrics is not None


@dataclass
class ExperimentResult:
    aggregate: AggregateReport
    records: list
    config: ExperimentConfig
    report_path: Path | None = None

    @property
    def n_failed(self) -> int:
        return sum(not r.ok for r in self.records)


# ------------------------------------------------------------ construction


def build_graph(cfg: ExperimentConfig, seed) -> WeightedDigraph:
    g = cfg.graph
    p = int(g["p"])
    if g["kind"] == "er_dag":
        deg = g.get("degree") or math.ceil(p / 2)
        graph = generate_er_dag(p, deg, tuple(g["weight_range"]), seed=seed)
    else:
        graph = generate_loop_graph(p, g["w_min"], g["w_max"], seed=seed)
    if g.get("self_noise_range"):
        rng = np.random.default_rng([seed, 5])
        graph = graph.with_diagonal(rng.uniform(*g["self_noise_range"], size=p))
    return graph


def build_drift(cfg: ExperimentConfig, seed, graph=None) -> AffineDrift:
    """Drift for one run; known-physics mask depends on the mode."""
    dr = cfg.drift
    p = int(cfg.graph["p"])
    rng = np.random.default_rng([seed, 2])
    lo, hi = cfg.diag_range()
    mode = dr["mode"]
    if mode == "custom":
        drift = AffineDrift.from_dict(dr["custom"])
        if drift.p != p:
            raise ParameterError(f"custom drift has p={drift.p}, graph p={p}")
        return drift
    attempts = int(dr.get("max_resample", 100)) if dr.get("require_stable") else 1
    for _ in range(max(attempts, 1)):
        if mode == "self_loops_uniform":
            B = np.diag(rng.uniform(lo, hi, size=p))
            known_B = np.ones((p, p), bool)
            known_b = np.ones(p, bool)
        else:
            # two-node feedback loop x1 <-> x2 in the top-left block
            B = np.zeros((p, p))
            B[0, 0], B[1, 1] = rng.uniform(lo, hi, size=2)
            u = rng.uniform(*dr["block_offdiag_range"], size=2)
            B[0, 1], B[1, 0] = u[0], -u[1]
            known_B = np.zeros((p, p), bool)
            known_B[:2, :2] = True
            known_b = np.zeros(p, bool)
            known_b[:2] = True
        drop = int(dr.get("unstable_drop_count", 0))
        if drop:
            idx = rng.choice(p, size=drop, replace=False)
            B[idx, idx] = 0.0
        drift = AffineDrift(B, np.zeros(p), known_B, known_b)
        if graph is None or not dr.get("require_stable"):
            return drift
        if check_stability(drift, graph).mean_square_stable:
            return drift
    raise SCDError(f"no mean-square stable drift found in {attempts} draws")


def misspecify(drift: AffineDrift, fraction, epsilon=None, seed=0):
    """Perturb ``round(fraction * m)`` of the m known B entries by U(-eps, eps).

    ``epsilon=None`` uses half the magnitude of each selected entry. Returns
    the perturbed drift and the number of entries touched.
    """
    idx = np.argwhere(drift.known_B)
    k = int(round(fraction * len(idx)))
    if k == 0:
        return drift, 0
    rng = np.random.default_rng([seed, 4])
    chosen = idx[rng.choice(len(idx), size=k, replace=False)]
    B = np.array(drift.B)
    for i, j in chosen:
        eps = 0.5 * abs(B[i, j]) if epsilon is None else float(epsilon)
        B[i, j] += rng.uniform(-eps, eps)
    return drift.replace(B=B), k


def sim_config(cfg: ExperimentConfig, seed) -> SimulationConfig:
    s = cfg.sim
    p = int(cfg.graph["p"])
    if s["x0_mode"] == "ones":
        x0 = None
    elif s["x0_mode"] == "uniform":
        x0 = np.random.default_rng([seed, 3]).uniform(*s["x0_range"], size=p)
    else:
        x0 = s["x0"]
    return SimulationConfig(s["t_start"], s["t_end"], int(s["n_steps"]), x0, seed=(seed, 1))


# -------------------------------------------------------------- execution


def _run_one(cfg: ExperimentConfig, index, out_dir):
    seed = cfg.base_seed + index
    rec = RunRecord(index, seed)
    clock = time.perf_counter
    stem = None if out_dir is None else Path(out_dir) / f"run_{index:03d}"
    try:
        t0 = clock()
        graph = build_graph(cfg, seed)
        drift = build_drift(cfg, seed, graph)
        stab = check_stability(drift, graph)
        rec.stability_margin = stab.margin
        rec.second_moment_abscissa = stab.second_moment_abscissa
        rec.timing["generate"] = clock() - t0

        t0 = clock()
        traj = simulate(drift, graph, sim_config(cfg, seed))
        rec.diverged = traj.diverged
        rec.timing["simulate"] = clock() - t0

        supplied = drift
        frac = float(cfg.misspec.get("miss_fraction", 0.0))
        if frac > 0:
            supplied, rec.misspecified_entries = misspecify(drift, frac, cfg.misspec.get("epsilon"), seed)
        t0 = clock()
        if cfg.learn_drift:
            fitted = fit_drift(traj, 0.0, supplied)
            supplied = fitted.as_drift(supplied.known_B, supplied.known_b)
        fit = fit_all_nodes(traj, supplied, cfg.estimator)
        rec.timing["fit"] = clock() - t0

        t0 = clock()
        est = fit.pattern()
        truth = binarize(graph, 0.0)
        rec.metrics = evaluate(est, truth, cfg.metrics["diagonal_policy"], cfg.metrics["reversal_policy"])
        rec.timing["score"] = clock() - t0

        if stem is not None:
            rec.graph_path = stem.with_name(stem.name + "_graph.json")
            rec.drift_path = stem.with_name(stem.name + "_drift.json")
            rec.trajectory_path = stem.with_name(stem.name + "_traj.csv")
            rec.estimate_path = stem.with_name(stem.name + "_est.json")
            rec.metrics_path = stem.with_name(stem.name + "_metrics.json")
            save_graph(graph, rec.graph_path)
            save_drift(supplied, rec.drift_path)
            save_trajectory(traj, rec.trajectory_path)
            save_estimate(fit, rec.estimate_path)
            save_metrics(rec.metrics, rec.metrics_path)
    except (SCDError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
        rec.metrics = None
    return rec


def _worker_count(workers):
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("SCD_THREADS")
    return max(1, int(env)) if env else 1


def run_experiment(config: ExperimentConfig, out_dir=None, report_path=None, workers=None) -> ExperimentResult:
    """Run ``config.runs`` seeded repetitions and aggregate their metrics.

    Run ``i`` uses seed ``base_seed + i``, so runs never influence each other.
    Per-run failures are recorded; the experiment raises only when every run
    fails. Artifacts are written when ``out_dir`` is given, the aggregate CSV
    when ``report_path`` is given (default ``out_dir/report.csv``).
    """
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        if report_path is None:
            report_path = Path(out_dir) / "report.csv"
    n = _worker_count(workers)
    idx = range(config.runs)
    if n > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=min(n, config.runs)) as pool:
            records = list(pool.map(_run_one, [config] * config.runs, idx, [out_dir] * config.runs))
    else:
        records = [_run_one(config, i, out_dir) for i in idx]
    good = [r.metrics for r in records if r.ok]
    if not good:
        raise SCDError("all runs failed: " + "; ".join(r.error or "?" for r in records))
    agg = aggregate(good)
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        write_aggregate_csv(agg, report_path)
    return ExperimentResult(agg, records, config, None if report_path is None else Path(report_path))


@dataclass(frozen=True)
class StressRow:
    miss_fraction: float
    shd: tuple
    fdr: tuple
    tpr: tuple
    runs: int


def stress_misspec(config: ExperimentConfig, fractions=None, workers=None, out_path=None):
    """Repeat the experiment with a growing share of known drift entries perturbed."""
    if config.drift["mode"] not in ("interaction_block", "custom"):
        raise ParameterError("stress test needs interaction_block or custom drift mode")
    fractions = list(fractions if fractions is not None else config.misspec.get("fractions") or DEFAULT_FRACTIONS)
    rows = []
    for f in fractions:
        res = run_experiment(config.updated(misspec={"miss_fraction": f}), workers=workers)
        a = res.aggregate
        rows.append(StressRow(f, (a.mean("shd"), a.std("shd")), (a.mean("fdr"), a.std("fdr")),
                              (a.mean("tpr"), a.std("tpr")), a["shd"].n))
    if out_path is not None:
        write_stress_csv(rows, out_path)
    return rows


def write_stress_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["miss_fraction", "shd_mean", "shd_std", "fdr_mean", "fdr_std", "tpr_mean", "tpr_std", "n"])
        for r in rows:
            w.writerow([r.miss_fraction, *map(repr, r.shd), *map(repr, r.fdr), *map(repr, r.tpr), r.runs])


def threshold_sweep(A_hat, truth, grid, diagonal_policy="exclude", reversal_policy="as_one"):
    """Score ``|A_hat|`` re-binarized at each threshold of an ascending grid."""
    grid = [float(t) for t in grid]
    if not grid:
        raise ParameterError("threshold grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ParameterError("threshold grid must be ascending")
    truth_pat = binarize(truth, 0.0) if isinstance(truth, WeightedDigraph) else truth
    rows = []
    for t in grid:
        est = binarize(A_hat, t, include_diagonal=diagonal_policy == "include")
        rep = evaluate(est, truth_pat, diagonal_policy, reversal_policy)
        rows.append({"threshold": t, "shd": rep.shd, "tpr": rep.tpr, "fdr": rep.fdr,
                     "n_edges": est.n_edges()})
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["threshold", "shd", "tpr", "fdr", "n_edges"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
