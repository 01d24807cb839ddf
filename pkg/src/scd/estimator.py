"""Per-node l1-penalized Gaussian quasi-likelihood estimation of the diffusion
coupling matrix, plus the drift learner and the theory-side diagnostics.

For node ``i`` with design rows ``x(k)`` and residuals ``r_k`` the smooth part is

    L(theta) = 1/(2n) * sum_k [ log((theta^T x(k))^2 + c) + r_k^2 / ((theta^T x(k))^2 + c) ]

and the estimate is a stationary point of ``L(theta) + lam * ||theta||_1``.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ._io import read_json, write_json
from .errors import DataQualityError, FormatError, ParameterError, StepSizeError
from .graph_model import binarize
from .sde_engine import AffineDrift, Trajectory, residuals

INIT_MODES = ("zero", "moment", "supplied")
STEP_RULES = ("fixed", "backtracking")
PENALTY_SCALES = ("total", "per_sample")


@dataclass(frozen=True)
class EstimatorConfig:
    """Solver settings.

    ``penalty_scale="total"`` applies ``lam`` to the summed negative
    quasi-log-likelihood, i.e. ``lam / n`` in the per-sample objective above;
    ``"per_sample"`` uses ``lam`` as is.
    """

    c: float = 0.1
    lam: float = 5.0
    threshold: float = 0.22
    max_iters: int = 5000
    grad_tol: float = 1e-6
    step_rule: str = "backtracking"
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    fixed_step: float | None = None
    init: str = "moment"
    restarts: int = 4
    theta0: tuple | None = None
    allow_diagonal: bool = True
    radius_projection: float | str | None = None
    penalty_scale: str = "total"
    stall_tol: float = 1e-10
    stall_window: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.c > 0:
            raise ParameterError(f"c must be positive, got {self.c}")
        if not self.lam >= 0:
            raise ParameterError(f"lambda must be nonnegative, got {self.lam}")
        if not self.threshold > 0:
            raise ParameterError(f"threshold must be positive, got {self.threshold}")
        if not (self.grad_tol > 0 and self.stall_tol > 0):
            raise ParameterError("tolerances must be positive")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ParameterError("max_iters must be a positive integer")
        if self.step_rule not in STEP_RULES:
            raise ParameterError(f"step_rule must be one of {STEP_RULES}")
        if self.step_rule == "fixed" and not (self.fixed_step and self.fixed_step > 0):
            raise ParameterError("fixed step rule needs a positive fixed_step")
        if not 0 < self.shrink < 1:
            raise ParameterError("shrink must lie in (0, 1)")
        if self.init not in INIT_MODES:
            raise ParameterError(f"init must be one of {INIT_MODES}")
        if self.init == "supplied" and self.theta0 is None:
            raise ParameterError("init='supplied' requires theta0")
        if self.penalty_scale not in PENALTY_SCALES:
            raise ParameterError(f"penalty_scale must be one of {PENALTY_SCALES}")
        rp = self.radius_projection
        if rp is not None and rp != "auto" and not (isinstance(rp, (int, float)) and rp > 0):
            raise ParameterError("radius_projection must be None, 'auto' or a positive radius")
        if self.theta0 is not None:
            object.__setattr__(self, "theta0", tuple(float(v) for v in np.ravel(self.theta0)))

    def effective_lambda(self, n) -> float:
        return self.lam / n if self.penalty_scale == "total" else self.lam

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        if d["theta0"] is not None:
            d["theta0"] = list(d["theta0"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown estimator fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class NodeSolution:
    node: int
    theta: np.ndarray
    objective_trace: np.ndarray
    kkt_residual: float
    converged: bool
    iterations: int
    stalled: bool = False
    lam_effective: float = float("nan")

    @property
    def final_objective(self) -> float:
        return float(self.objective_trace[-1])


@dataclass(frozen=True, eq=False)
class FitResult:
    A_hat: np.ndarray
    solutions: tuple
    config: EstimatorConfig

    def pattern(self, threshold=None, include_diagonal=True):
        t = self.config.threshold if threshold is None else threshold
        return binarize(self.A_hat, t, include_diagonal=include_diagonal)

    def to_dict(self):
        pat = self.pattern()
        return {
            "A_hat": [float(v) for v in self.A_hat.ravel()],
            "threshold": float(self.config.threshold),
            "pattern": [bool(v) for v in pat.present.ravel()],
            "per_node": [
                {
                    "node": s.node,
                    "iterations": s.iterations,
                    "kkt_residual": float(s.kkt_residual),
                    "converged": bool(s.converged),
                    "final_objective": s.final_objective,
                }
                for s in self.solutions
            ],
            "config": self.config.to_dict(),
        }


@dataclass(frozen=True)
class DriftFit:
    B_hat: np.ndarray
    b_hat: np.ndarray
    lambda_B: float

    def as_drift(self, known_B=None, known_b=None) -> AffineDrift:
        return AffineDrift(self.B_hat, self.b_hat, known_B, known_b)


@dataclass(frozen=True)
class TheoryBounds:
    lambda_lower: float
    beta_min: float | None
    inputs: dict = field(default_factory=dict)

    @property
    def beta_min_violated(self) -> bool:
        return self.beta_min is None


# ---------------------------------------------------------------- objective


def _check_c(c):
    if not c > 0:
        raise ParameterError(f"stabilization constant c must be positive, got {c}")


def node_objective(theta, states, resid_col, c, lam) -> float:
    _check_c(c)
    theta = np.asarray(theta, dtype=float)
    X = np.asarray(states, dtype=float)
    r = np.asarray(resid_col, dtype=float)
    if X.shape != (r.size, theta.size):
        raise ParameterError(f"states {X.shape} do not match theta {theta.shape} / residuals {r.shape}")
    z = X @ theta
    s = z * z + c
    return float(0.5 * np.mean(np.log(s) + r * r / s) + lam * np.abs(theta).sum())


def node_gradient(theta, states, resid_col, c) -> np.ndarray:
    """Gradient of the smooth part: ``(1/n) sum_k u_k x(k)``."""
    _check_c(c)
    theta = np.asarray(theta, dtype=float)
    X = np.asarray(states, dtype=float)
    r = np.asarray(resid_col, dtype=float)
    if X.shape != (r.size, theta.size):
        raise ParameterError(f"states {X.shape} do not match theta {theta.shape} / residuals {r.shape}")
    z = X @ theta
    s = z * z + c
    u = z * (s - r * r) / (s * s)
    return X.T @ u / r.size


def curvature(z, r, c):
    """Second derivative of ``phi(z) = log(z^2 + c) + r^2 / (z^2 + c)``."""
    _check_c(c)
    s = z * z + c
    return 2.0 * (c - z * z) / s**2 - 2.0 * r * r * (c - 3.0 * z * z) / s**3


def soft_threshold(v, kappa):
    if np.any(np.asarray(kappa) < 0):
        raise ParameterError("kappa must be nonnegative")
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


def kkt_check(theta, gradient, lam, tol, free=None):
    """Stationarity residual of the l1 problem; returns ``(passed, residual)``.

    ``free`` optionally masks the coordinates that are optimized (pinned ones
    are skipped).
    """
    if tol < 0:
        raise ParameterError("tol must be nonnegative")
    theta = np.asarray(theta, dtype=float)
    G = np.asarray(gradient, dtype=float)
    viol = np.where(theta != 0, np.abs(G + lam * np.sign(theta)), np.maximum(np.abs(G) - lam, 0.0))
    if free is not None:
        viol = viol[np.asarray(free, dtype=bool)]
    res = float(viol.max()) if viol.size else 0.0
    return res <= tol, res


# ------------------------------------------------------------------ solver


def moment_init(states, resid_col):
    """Rank-one moment estimate of theta from ``E[r^2 | x] = (theta^T x)^2``.

    Regress ``r^2`` on the quadratic features ``x x^T`` and take the leading
    eigenpair of the fitted symmetric matrix. Sign is arbitrary (the objective
    is even in theta).
    """
    X = np.asarray(states, dtype=float)
    p = X.shape[1]
    iu = np.triu_indices(p)
    F = X[:, iu[0]] * X[:, iu[1]]
    F[:, iu[0] != iu[1]] *= 2.0
    m, *_ = np.linalg.lstsq(F, np.asarray(resid_col) ** 2, rcond=None)
    M = np.zeros((p, p))
    M[iu] = m
    M = M + M.T - np.diag(np.diag(M))
    w, V = np.linalg.eigh(M)
    return V[:, -1] * math.sqrt(max(w[-1], 0.0))


def _lipschitz_estimate(theta, X, r, c):
    z = X @ theta
    w = np.abs(curvature(z, r, c))
    H = (X * w[:, None]).T @ X / (2.0 * r.size)
    return max(float(np.linalg.eigvalsh(H)[-1]), 1e-12)


def _project(theta, radius):
    nrm = np.linalg.norm(theta)
    return theta if radius is None or nrm <= radius else theta * (radius / nrm)


def _prox_gradient(theta, X, r, c, lam, free, cfg, radius):
    """Proximal gradient from ``theta``; returns (theta, trace, kkt, converged, iters, stalled)."""

    XT = np.ascontiguousarray(X.T)
    r2 = r * r
    inv2n = 0.5 / r.size
    pinned = ~free

    def F(t):
        z = X @ t
        s = z * z + c
        return inv2n * float((np.log(s) + r2 / s).sum()) + lam * float(np.abs(t).sum())

    def grad(t):
        z = X @ t
        s = z * z + c
        g = XT @ (z * (s - r2) / (s * s)) / r.size
        g[pinned] = 0.0
        return g

    def stationarity(t, g):
        viol = np.where(t != 0, np.abs(g + lam * np.sign(t)), np.maximum(np.abs(g) - lam, 0.0))
        viol[pinned] = 0.0
        res = float(viol.max())
        return res <= cfg.grad_tol, res

    theta = _project(np.where(free, theta, 0.0), radius)
    fval = F(theta)
    if not np.isfinite(fval):
        raise StepSizeError("objective is not finite at the starting point")
    trace = [fval]
    G = grad(theta)
    ok, kkt = stationarity(theta, G)
    if ok:
        return theta, np.array(trace), kkt, True, 0, False
    if cfg.step_rule == "fixed":
        step = cfg.fixed_step
    else:
        step = 1.0 / _lipschitz_estimate(theta, X, r, c)
    prev_theta = prev_G = None
    stalled = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if cfg.step_rule == "backtracking" and prev_theta is not None:
            # Barzilai-Borwein guess, corrected by the line search below
            s_vec, y_vec = theta - prev_theta, G - prev_G
            sy = float(s_vec @ y_vec)
            if sy > 0:
                step = min(max(float(s_vec @ s_vec) / sy, 1e-10), 1e10)
        while True:
            v = theta - step * G
            cand = np.sign(v) * np.maximum(np.abs(v) - step * lam, 0.0)
            cand[pinned] = 0.0
            if radius is not None:
                cand = _project(cand, radius)
            fc = F(cand)
            d = cand - theta
            if cfg.step_rule == "fixed":
                break
            if np.isfinite(fc) and fc <= fval - cfg.sufficient_decrease / (2.0 * step) * float(d @ d):
                break
            step *= cfg.shrink
            if step < 1e-20:
                if not np.isfinite(fc):
                    raise StepSizeError("line search failed to reach a finite objective")
                cand, fc = theta, fval
                break
        if not np.isfinite(fc):
            raise StepSizeError("objective became non-finite")
        prev_theta, prev_G = theta, G
        theta, fval = cand, fc
        trace.append(fval)
        G = grad(theta)
        ok, kkt = stationarity(theta, G)
        if ok:
            return theta, np.array(trace), kkt, True, it, False
        w = cfg.stall_window
        if len(trace) > w:
            ref = trace[-1 - w]
            if abs(ref - fval) <= cfg.stall_tol * max(1.0, abs(ref)):
                stalled = True
                break
        if step < 1e-20 and np.array_equal(theta, prev_theta):
            stalled = True
            break
    return theta, np.array(trace), kkt, False, it, stalled


def _starts(node, p, X, r, cfg):
    if cfg.init == "zero":
        base = np.zeros(p)
    elif cfg.init == "supplied":
        base = np.array(cfg.theta0, dtype=float)
        if base.shape != (p,):
            raise ParameterError(f"theta0 has length {base.size}, expected {p}")
    else:
        base = moment_init(X, r)
    starts = [base]
    rng = np.random.default_rng([cfg.seed, node])
    for _ in range(cfg.restarts):
        starts.append(rng.standard_normal(p))
    return starts


def _resolve_radius(cfg, X):
    if cfg.radius_projection is None:
        return None
    if cfg.radius_projection == "auto":
        K = float(np.max(np.abs(X))) if X.size else 0.0
        return math.sqrt(cfg.c / (2.0 * K * K)) if K > 0 else None
    return float(cfg.radius_projection)


def _solve_from_residuals(node, X, r, config):
    n, p = X.shape
    free = np.ones(p, bool)
    if not config.allow_diagonal:
        free[node] = False
    lam = config.effective_lambda(n)
    radius = _resolve_radius(config, X)
    best = None
    for theta0 in _starts(node, p, X, r, config):
        theta, trace, kkt, conv, iters, stalled = _prox_gradient(theta0, X, r, config.c, lam, free, config, radius)
        if best is None or trace[-1] < best[1][-1]:
            best = (theta, trace, kkt, conv, iters, stalled)
    theta, trace, kkt, conv, iters, stalled = best
    theta.setflags(write=False)
    return NodeSolution(node, theta, trace, kkt, conv, iters, stalled, lam)


def _design(traj: Trajectory, drift):
    if traj.diverged or not np.all(np.isfinite(traj.states)):
        raise DataQualityError("trajectory diverged; refusing to fit")
    if traj.n_steps < 2:
        raise DataQualityError(f"need at least 2 transitions, got {traj.n_steps}")
    return traj.states[:-1], residuals(traj, drift)


def solve_node(node, traj: Trajectory, drift, config: EstimatorConfig = EstimatorConfig()) -> NodeSolution:
    """Fit row ``node`` of the coupling matrix.

    Runs proximal gradient from each start (the configured initial point plus
    ``config.restarts`` seeded Gaussian starts) and keeps the lowest objective.
    Zero is always stationary for this loss, which is why the default start is
    the moment estimate rather than zero.
    """
    X, R = _design(traj, drift)
    if not 0 <= node < traj.p:
        raise ParameterError(f"node {node} out of range for p={traj.p}")
    return _solve_from_residuals(node, X, R[:, node], config)


def fit_all_nodes(traj: Trajectory, drift, config: EstimatorConfig = EstimatorConfig(),
                  workers=1, order=None) -> FitResult:
    """Solve every node independently and stack the rows into ``A_hat``."""
    X, R = _design(traj, drift)
    p = traj.p
    order = list(range(p)) if order is None else list(order)
    if sorted(order) != list(range(p)):
        raise ParameterError("order must be a permutation of the node indices")

    def one(i):
        try:
            return _solve_from_residuals(i, X, R[:, i], config)
        except Exception as exc:  # re-raised below with the node index
            return exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(zip(order, pool.map(one, order)))
    else:
        results = {i: one(i) for i in order}
    errors = {i: e for i, e in results.items() if isinstance(e, Exception)}
    if errors:
        detail = "; ".join(f"node {i}: {e}" for i, e in sorted(errors.items()))
        raise type(next(iter(errors.values())))(detail)
    sols = tuple(results[i] for i in range(p))
    A_hat = np.vstack([s.theta for s in sols])
    A_hat.setflags(write=False)
    return FitResult(A_hat, sols, config)


def save_estimate(result: FitResult, path):
    write_json(path, result.to_dict())


def load_estimate(path):
    """Read an estimate JSON back into ``(A_hat, threshold, pattern, raw_dict)``."""
    d = read_json(path)
    for key in ("A_hat", "threshold", "pattern"):
        if key not in d:
            raise FormatError("missing", path=Path(path), field=key)
    m = len(d["A_hat"])
    p = math.isqrt(m)
    if p * p != m or len(d["pattern"]) != m:
        raise FormatError("A_hat/pattern are not p*p long", path=Path(path), field="A_hat")
    A = np.array(d["A_hat"], dtype=float).reshape(p, p)
    pattern = np.array(d["pattern"], dtype=bool).reshape(p, p)
    return A, float(d["threshold"]), pattern, d


# --------------------------------------------------------------- drift fit


def fit_drift(traj: Trajectory, lambda_B=0.0, known: AffineDrift | None = None,
              max_sweeps=10000, tol=1e-12) -> DriftFit:
    """Penalized least squares for the affine drift.

    Minimizes ``1/(2n) sum_k ||dx_k/dt_k - B x(k) - b||^2 + lambda_B ||B||_1``
    row by row with coordinate descent (``b`` unpenalized). Entries flagged
    known in ``known`` are held at their supplied values.
    """
    if lambda_B < 0:
        raise ParameterError("lambda_B must be nonnegative")
    if traj.n_steps < 1:
        raise ParameterError("need at least one transition")
    X = traj.states[:-1]
    Y = np.diff(traj.states, axis=0) / traj.step_sizes()[:, None]
    n, p = X.shape
    if known is None:
        known = AffineDrift.zeros(p, known=False)
    if known.p != p:
        raise ParameterError(f"known drift has p={known.p}, trajectory p={p}")
    Z = np.hstack([X, np.ones((n, 1))])
    if np.linalg.matrix_rank(Z) < p + 1:
        warnings.warn("drift design is rank deficient; the minimizer is not unique", RuntimeWarning)
    coef = np.hstack([known.B, known.b[:, None]]).astype(float)
    fixed = np.hstack([known.known_B, known.known_b[:, None]])
    pen = np.r_[np.full(p, float(lambda_B)), 0.0]
    col_sq = (Z * Z).sum(axis=0) / n
    for i in range(p):
        free = np.flatnonzero(~fixed[i])
        if free.size == 0:
            continue
        target = Y[:, i] - Z[:, fixed[i]] @ coef[i, fixed[i]]
        Zf = Z[:, free]
        if lambda_B == 0:
            w, *_ = np.linalg.lstsq(Zf, target, rcond=None)
            coef[i, free] = w
            continue
        w = np.zeros(free.size)
        resid = target.copy()
        for _ in range(max_sweeps):
            delta = 0.0
            for j, col in enumerate(free):
                if col_sq[col] == 0:
                    continue
                old = w[j]
                rho = Zf[:, j] @ resid / n + col_sq[col] * old
                new = soft_threshold(rho, pen[col]) / col_sq[col]
                if new != old:
                    resid -= Zf[:, j] * (new - old)
                    w[j] = new
                    delta = max(delta, abs(new - old))
            if delta <= tol:
                break
        coef[i, free] = w
    return DriftFit(coef[:, :p], coef[:, p], float(lambda_B))


# ------------------------------------------------------------------ theory


def lambda_lower_bound(alpha, K, c, p, n, s) -> float:
    """Smallest regularization level covered by the support-recovery guarantee."""
    if n is None or n <= 0:
        raise ParameterError("n must be positive")
    if p < 2:
        raise ParameterError("p must be at least 2 (log p must be positive)")
    if not 0 < alpha <= 1:
        raise ParameterError("alpha must lie in (0, 1]")
    if K <= 0 or c <= 0 or s <= 0:
        raise ParameterError("K, c and s must be positive")
    lead = 4.0 * (2.0 - alpha) / alpha
    noise = 8.0 * K / math.sqrt(c) * math.sqrt(2.0 * math.log(p) / n)
    support = math.sqrt(2.0) * K / math.sqrt(c) * math.sqrt(s / n)
    return lead * (noise + support)


def beta_min_bound(lam, s, alpha1, tau):
    """Minimum detectable coefficient, or ``None`` when ``alpha1 - 16 tau s <= 0``."""
    denom = alpha1 - 16.0 * tau * s
    if denom <= 0:
        return None
    return 3.0 * math.sqrt(s) * lam / denom


def theory_bounds(alpha, K, c, p, n, s, alpha1, tau) -> TheoryBounds:
    lam = lambda_lower_bound(alpha, K, c, p, n, s)
    inputs = dict(alpha=alpha, K=K, c=c, p=p, n=n, s=s, alpha1=alpha1, tau=tau)
    return TheoryBounds(lam, beta_min_bound(lam, s, alpha1, tau), inputs)


def with_config(config: EstimatorConfig, **changes) -> EstimatorConfig:
    return replace(config, **changes)
