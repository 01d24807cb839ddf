"""Structural scores (SHD, TPR, FDR) for a recovered graph against ground truth."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import read_json, write_json
from .errors import ParameterError
from .graph_model import AdjacencyPattern, WeightedDigraph, binarize

DIAGONAL_POLICIES = ("include", "exclude")
REVERSAL_POLICIES = ("as_one", "as_two")
METRIC_NAMES = ("shd", "tpr", "fdr")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int
    reversals: int
    compared_pairs: int
    reversal_policy: str = "as_one"

    @property
    def true_edges(self) -> int:
        """Edges in the truth, reversed ones included."""
        if self.reversal_policy == "as_one":
            return self.tp + self.fn + self.reversals
        return self.tp + self.fn

    @property
    def predicted_edges(self) -> int:
        if self.reversal_policy == "as_one":
            return self.tp + self.fp + self.reversals
        return self.tp + self.fp


@dataclass(frozen=True)
class MetricsReport:
    shd: int
    tpr: float
    fdr: float
    diagonal_policy: str = "exclude"
    reversal_policy: str = "as_one"
    flags: tuple = ()
    counts: ConfusionCounts | None = field(default=None, compare=False)

    def to_dict(self):
        d = {
            "shd": int(self.shd),
            "tpr": float(self.tpr),
            "fdr": float(self.fdr),
            "policies": {"diagonal": self.diagonal_policy, "reversal": self.reversal_policy},
            "flags": list(self.flags),
        }
        if self.counts is not None:
            c = self.counts
            d["counts"] = {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
                           "reversals": c.reversals, "compared_pairs": c.compared_pairs}
        return d

    @classmethod
    def from_dict(cls, d):
        pol = d.get("policies", {})
        counts = None
        if "counts" in d:
            counts = ConfusionCounts(**d["counts"], reversal_policy=pol.get("reversal", "as_one"))
        return cls(int(d["shd"]), float(d["tpr"]), float(d["fdr"]),
                   pol.get("diagonal", "exclude"), pol.get("reversal", "as_one"),
                   tuple(d.get("flags", ())), counts)


def _as_matrix(pattern):
    if isinstance(pattern, AdjacencyPattern):
        return pattern.present
    if isinstance(pattern, WeightedDigraph):
        return binarize(pattern, 0.0).present
    return np.asarray(pattern, dtype=bool)


def _check_policies(diagonal_policy, reversal_policy):
    if diagonal_policy not in DIAGONAL_POLICIES:
        raise ParameterError(f"diagonal_policy must be one of {DIAGONAL_POLICIES}")
    if reversal_policy not in REVERSAL_POLICIES:
        raise ParameterError(f"reversal_policy must be one of {REVERSAL_POLICIES}")


def confusion(est, truth, diagonal_policy="exclude", reversal_policy="as_one") -> ConfusionCounts:
    """Classify every compared ordered pair.

    With ``as_one``, a pair where the truth holds only ``i -> j`` and the
    estimate only ``j -> i`` is a single reversal; both ordered slots are then
    removed from tp/fp/fn/tn. With ``as_two`` reversals are still counted for
    information, but they also contribute one fp and one fn.
    """
    _check_policies(diagonal_policy, reversal_policy)
    E = _as_matrix(est)
    T = _as_matrix(truth)
    if E.shape != T.shape or E.ndim != 2 or E.shape[0] != E.shape[1]:
        raise ParameterError(f"pattern shapes differ: {E.shape} vs {T.shape}")
    p = E.shape[0]
    mask = ~np.eye(p, dtype=bool) if diagonal_policy == "exclude" else np.ones((p, p), bool)

    # rev[i, j]: truth has j -> i only, estimate has i -> j only (row = child)
    rev = T & ~T.T & E.T & ~E
    rev[np.diag_indices(p)] = False
    n_rev = np.count_nonzero(rev)
    if reversal_policy == "as_one" and n_rev:
        mask &= ~(rev | rev.T)

    cnt = np.count_nonzero
    tp = cnt(E & T & mask)
    fp = cnt(E & mask) - tp
    fn = cnt(T & mask) - tp
    total = cnt(mask)
    tn = total - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn, n_rev, total, reversal_policy)


def shd(counts: ConfusionCounts) -> int:
    if counts.reversal_policy == "as_one":
        return counts.fp + counts.fn + counts.reversals
    return counts.fp + counts.fn


def tpr(counts: ConfusionCounts):
    """Recovered fraction of true edges; ``(1.0, True)`` when the truth is empty."""
    denom = counts.true_edges
    if denom == 0:
        return 1.0, True
    return counts.tp / denom, False


def fdr(counts: ConfusionCounts):
    """Wrong fraction of predicted edges; ``(0.0, True)`` when nothing is predicted."""
    denom = counts.predicted_edges
    if denom == 0:
        return 0.0, True
    return (denom - counts.tp) / denom, False


def evaluate(est, truth, diagonal_policy="exclude", reversal_policy="as_one") -> MetricsReport:
    counts = confusion(est, truth, diagonal_policy, reversal_policy)
    t, empty_truth = tpr(counts)
    f, empty_est = fdr(counts)
    flags = []
    if empty_truth:
        flags.append("empty_truth")
    if empty_est:
        flags.append("empty_estimate")
    return MetricsReport(shd(counts), t, f, diagonal_policy, reversal_policy, tuple(flags), counts)


@dataclass(frozen=True)
class MetricSummary:
    metric: str
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class AggregateReport:
    rows: tuple
    diagonal_policy: str
    reversal_policy: str
    flags: tuple = ()

    def __getitem__(self, metric) -> MetricSummary:
        for row in self.rows:
            if row.metric == metric:
                return row
        raise KeyError(metric)

    def mean(self, metric):
        return self[metric].mean

    def std(self, metric):
        return self[metric].std


def aggregate(reports) -> AggregateReport:
    """Mean and sample (n-1) standard deviation of each metric across runs."""
    reports = list(reports)
    if not reports:
        raise ParameterError("cannot aggregate an empty list of reports")
    pols = {(r.diagonal_policy, r.reversal_policy) for r in reports}
    if len(pols) != 1:
        raise ParameterError(f"inconsistent policies across reports: {sorted(pols)}")
    n = len(reports)
    rows = []
    for name in METRIC_NAMES:
        vals = np.array([float(getattr(r, name)) for r in reports])
        std = float(vals.std(ddof=1)) if n > 1 else 0.0
        rows.append(MetricSummary(name, float(vals.mean()), std, n))
    flags = ("single_run",) if n == 1 else ()
    diag, rev = pols.pop()
    return AggregateReport(tuple(rows), diag, rev, flags)


def save_metrics(report: MetricsReport, path):
    write_json(path, report.to_dict())


def load_metrics(path) -> MetricsReport:
    return MetricsReport.from_dict(read_json(path))


def write_aggregate_csv(agg: AggregateReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean", "std", "n"])
        for row in agg.rows:
            w.writerow([row.metric, repr(row.mean), repr(row.std), row.n])


def read_aggregate_csv(path):
    out = {}
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["metric"]] = (float(row["mean"]), float(row["std"]), int(row["n"]))
    return out

