"""Euler-Maruyama simulation of the linear SDE with diagonal multiplicative noise

    dX_i = (B X + b)_i dt + (a_i^T X) dW_i,   i = 1..p,

with independent Brownian motions W_i, plus the drift-adjusted residuals the
estimator consumes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import read_json, require, write_json
from .errors import FormatError, ParameterError

RNG_ALGORITHM = "numpy.PCG64"
OVERFLOW_GUARD = 1e6


def _weights(graph):
    return np.asarray(getattr(graph, "weights", graph), dtype=float)


@dataclass(frozen=True, eq=False)
class AffineDrift:
    """Drift ``B x + b`` with a mask of entries regarded as known physics.

    Unknown entries still hold a numeric value (zero unless supplied) so the
    simulator never sees a hole.
    """

    B: np.ndarray
    b: np.ndarray | None = None
    known_B: np.ndarray | None = None
    known_b: np.ndarray | None = None

    def __post_init__(self):
        B = np.array(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ParameterError(f"B must be square, got shape {B.shape}")
        p = B.shape[0]
        b = np.zeros(p) if self.b is None else np.array(self.b, dtype=float).reshape(-1)
        if b.shape != (p,):
            raise ParameterError(f"b must have length {p}, got {b.shape}")
        kB = np.ones((p, p), bool) if self.known_B is None else np.array(self.known_B, dtype=bool)
        kb = np.ones(p, bool) if self.known_b is None else np.array(self.known_b, dtype=bool).reshape(-1)
        if kB.shape != (p, p) or kb.shape != (p,):
            raise ParameterError("known mask does not match drift dimensions")
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(b))):
            raise ParameterError("drift contains non-finite entries")
        for name, arr in (("B", B), ("b", b), ("known_B", kB), ("known_b", kb)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, p, known=False):
        mask = np.full((p, p), known)
        return cls(np.zeros((p, p)), np.zeros(p), mask, np.full(p, known))

    @property
    def p(self) -> int:
        return self.B.shape[0]

    @property
    def known_mask(self) -> np.ndarray:
        """Flat mask: B row-major followed by b."""
        return np.concatenate([self.known_B.ravel(), self.known_b])

    def __call__(self, x):
        return self.B @ x + self.b

    def replace(self, B=None, b=None, known_B=None, known_b=None):
        return AffineDrift(
            self.B if B is None else B,
            self.b if b is None else b,
            self.known_B if known_B is None else known_B,
            self.known_b if known_b is None else known_b,
        )

    def __eq__(self, other):
        if not isinstance(other, AffineDrift):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("B", "b", "known_B", "known_b"))

    def to_dict(self):
        return {
            "B": [float(v) for v in self.B.ravel()],
            "b": [float(v) for v in self.b],
            "known_mask": [bool(v) for v in self.known_mask],
        }

    @classmethod
    def from_dict(cls, d, path=None):
        B = require(d, "B", list, path)
        p = math.isqrt(len(B))
        if p * p != len(B) or p == 0:
            raise FormatError(f"B has {len(B)} entries, not a square count", path=path, field="B")
        b = d.get("b", [0.0] * p)
        if not isinstance(b, list) or len(b) != p:
            raise FormatError(f"expected {p} offsets", path=path, field="b")
        mask = d.get("known_mask", [True] * (p * p + p))
        if not isinstance(mask, list) or len(mask) != p * p + p:
            raise FormatError(f"expected {p * p + p} mask flags", path=path, field="known_mask")
        try:
            Bm = np.array(B, dtype=float).reshape(p, p)
            bv = np.array(b, dtype=float)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"non-numeric entry ({exc})", path=path, field="B") from None
        m = np.array(mask, dtype=bool)
        return cls(Bm, bv, m[: p * p].reshape(p, p), m[p * p:])


@dataclass(frozen=True)
class SimulationConfig:
    t_start: float = 0.0
    t_end: float = 5.0
    n_steps: int = 500
    x0: tuple | None = None  # None -> all ones
    seed: int = 0

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ParameterError(f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ParameterError(f"n_steps must be a positive integer, got {self.n_steps}")
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in np.ravel(self.x0)))

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    def initial_state(self, p):
        if self.x0 is None:
            return np.ones(p)
        x0 = np.array(self.x0, dtype=float)
        if x0.shape != (p,):
            raise ParameterError(f"x0 has length {x0.size}, expected {p}")
        return x0


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    seed: int | None = None
    diverged: bool = False
    rng: str = RNG_ALGORITHM
    draws: np.ndarray | None = field(default=None, repr=False)
    dt: float | None = None

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        x = np.array(self.states, dtype=float)
        if x.ndim != 2 or t.shape != (x.shape[0],):
            raise ParameterError(f"times {t.shape} and states {x.shape} disagree")
        if t.size >= 2 and not np.all(np.diff(t) > 0):
            raise ParameterError("times must be strictly increasing")
        for name, arr in (("times", t), ("states", x)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def p(self) -> int:
        return self.states.shape[1]

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    def step_sizes(self):
        """Per-transition step sizes; the recorded uniform step when available."""
        if self.dt is not None:
            return np.full(self.n_steps, self.dt)
        return np.diff(self.times)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.states, other.states)


def em_step(x, drift, graph, dt, z):
    """One Euler-Maruyama transition for all components at once."""
    if dt <= 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    A = _weights(graph)
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if A.shape != (x.size, x.size) or drift.p != x.size or z.shape != x.shape:
        raise ParameterError("dimension mismatch between state, drift, graph and draws")
    return x + (drift.B @ x + drift.b) * dt + (A @ x) * math.sqrt(dt) * z


def simulate(drift, graph, config: SimulationConfig, record_draws=False) -> Trajectory:
    """Seeded Euler-Maruyama path on a uniform grid.

    One standard normal per component per step is drawn from PCG64 seeded with
    ``config.seed``. A run whose state norm leaves the overflow guard (or
    becomes non-finite) is flagged ``diverged`` but still returned in full.
    """
    A = _weights(graph)
    p = drift.p
    if A.shape != (p, p):
        raise ParameterError(f"graph is {A.shape}, drift is {p}x{p}")
    x = config.initial_state(p)
    if not np.all(np.isfinite(x)):
        raise ParameterError("x0 must be finite")
    n, dt = int(config.n_steps), config.dt
    rng = np.random.default_rng(config.seed)
    z = rng.standard_normal((n, p))
    sq = math.sqrt(dt)
    B, b = drift.B, drift.b
    out = np.empty((n + 1, p))
    out[0] = x
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            x = x + (B @ x + b) * dt + (A @ x) * sq * z[k]
            out[k + 1] = x
            if not diverged and not (np.linalg.norm(x) <= OVERFLOW_GUARD):
                diverged = True
    times = config.t_start + dt * np.arange(n + 1)
    return Trajectory(times, out, seed=config.seed, diverged=diverged,
                      draws=z if record_draws else None, dt=dt)


def residuals(traj: Trajectory, drift) -> np.ndarray:
    """``r[k, i] = (x_i(k+1) - x_i(k) - (B x(k) + b)_i dt_k) / sqrt(dt_k)``, shape (n, p)."""
    if traj.p != drift.p:
        raise ParameterError(f"trajectory has {traj.p} components, drift {drift.p}")
    if traj.n_steps < 1:
        raise ParameterError("need at least one transition")
    X = traj.states
    dt = traj.step_sizes()[:, None]
    g = X[:-1] @ drift.B.T + drift.b
    return ((X[1:] - X[:-1]) - g * dt) / np.sqrt(dt)


def save_trajectory(traj: Trajectory, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(traj.p)])
        for t, row in zip(traj.times, traj.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FormatError(str(exc), path=path) from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "t" or len(header) < 2:
            raise FormatError("header must be 't,x1,...,xp'", path=path, line=1)
        width = len(header)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise FormatError(f"expected {width} columns, got {len(row)}", path=path, line=line)
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FormatError(str(exc), path=path, line=line) from None
    if len(rows) < 2:
        raise FormatError("trajectory needs at least two rows", path=path)
    data = np.array(rows)
    t = data[:, 0]
    steps = np.diff(t)
    if np.any(steps <= 0):
        bad = int(np.flatnonzero(steps <= 0)[0]) + 3  # header + 1-based + next row
        raise FormatError("times must be strictly increasing", path=path, line=bad)
    dt = None
    n = len(t) - 1
    if np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        dt = (t[-1] - t[0]) / n
    states = data[:, 1:]
    diverged = bool(not np.all(np.isfinite(states))
                    or np.max(np.linalg.norm(states, axis=1)) > OVERFLOW_GUARD)
    return Trajectory(t, states, diverged=diverged, rng="unknown", dt=dt)


def save_drift(drift: AffineDrift, path):
    write_json(path, drift.to_dict())


def load_drift(path) -> AffineDrift:
    return AffineDrift.from_dict(read_json(path), path=Path(path))
