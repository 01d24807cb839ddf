"""Ground-truth coupling graphs and the mean-square stability diagnostic.

Weight matrices follow the row-parent convention: ``weights[i, j]`` is the
coefficient of node ``j`` in the diffusion channel of node ``i``, so a nonzero
entry encodes the edge ``j -> i``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import read_json, require, write_json
from .errors import FormatError, ParameterError

GRAPH_KINDS = ("er_dag", "loop", "custom")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WeightedDigraph:
    weights: np.ndarray
    kind: str = "custom"
    seed: int | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise ParameterError(f"weights must be a non-empty square matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ParameterError("weights contain non-finite entries")
        if self.kind not in GRAPH_KINDS:
            raise ParameterError(f"unknown graph kind {self.kind!r}")
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def p(self) -> int:
        return self.weights.shape[0]

    def edges(self, include_diagonal=False):
        """List of ``(parent, child)`` pairs with nonzero weight."""
        out = []
        for i, j in zip(*np.nonzero(self.weights)):
            if i != j or include_diagonal:
                out.append((int(j), int(i)))
        return sorted(out)

    def n_edges(self, include_diagonal=False) -> int:
        return len(self.edges(include_diagonal))

    def with_diagonal(self, diag) -> "WeightedDigraph":
        w = np.array(self.weights)
        np.fill_diagonal(w, diag)
        return WeightedDigraph(w, kind=self.kind, seed=self.seed)

    def __eq__(self, other):
        if not isinstance(other, WeightedDigraph):
            return NotImplemented
        return (self.kind == other.kind and self.seed == other.seed
                and np.array_equal(self.weights, other.weights))

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "weights": [float(v) for v in self.weights.ravel()],
            "kind": self.kind,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict, path=None) -> "WeightedDigraph":
        p = require(d, "p", int, path)
        w = require(d, "weights", list, path)
        if len(w) != p * p:
            raise FormatError(f"expected {p * p} weights, got {len(w)}", path=path, field="weights")
        kind = d.get("kind", "custom")
        if kind not in GRAPH_KINDS:
            raise FormatError(f"unknown kind {kind!r}", path=path, field="kind")
        try:
            weights = np.array(w, dtype=float).reshape(p, p)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"non-numeric weight ({exc})", path=path, field="weights") from None
        return cls(weights, kind=kind, seed=d.get("seed"))


@dataclass(frozen=True, eq=False)
class AdjacencyPattern:
    present: np.ndarray
    include_diagonal: bool = True

    def __post_init__(self):
        m = np.asarray(self.present, dtype=bool)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ParameterError(f"pattern must be square, got shape {m.shape}")
        if not self.include_diagonal:
            m = m.copy()
            np.fill_diagonal(m, False)
        object.__setattr__(self, "present", _frozen(m, bool))

    @property
    def p(self) -> int:
        return self.present.shape[0]

    def n_edges(self) -> int:
        return int(self.present.sum())

    def __eq__(self, other):
        if not isinstance(other, AdjacencyPattern):
            return NotImplemented
        return (self.include_diagonal == other.include_diagonal
                and np.array_equal(self.present, other.present))


@dataclass(frozen=True)
class StabilityReport:
    log_norm_drift: float
    diffusion_norm_sq: float
    margin: float
    stable: bool
    # exact criterion: spectral abscissa of the second-moment generator
    second_moment_abscissa: float = field(default=float("nan"))

    @property
    def mean_square_stable(self) -> bool:
        return self.second_moment_abscissa < 0


def generate_er_dag(p, expected_degree, weight_range=(0.3, 1.3), seed=0) -> WeightedDigraph:
    """Erdos-Renyi DAG with randomly permuted node labels.

    Each strictly lower-triangular slot is filled with probability
    ``expected_degree / p`` (clipped to [0, 1]) and a Unif(weight_range)
    weight.
    """
    if int(p) != p or p < 1:
        raise ParameterError(f"p must be a positive integer, got {p!r}")
    if expected_degree <= 0 or expected_degree > p:
        raise ParameterError(f"expected_degree must lie in (0, p], got {expected_degree!r}")
    low, high = (float(v) for v in weight_range)
    if not (np.isfinite(low) and np.isfinite(high) and low < high):
        raise ParameterError(f"degenerate weight_range {weight_range!r}")
    p = int(p)
    rng = np.random.default_rng(seed)
    prob = min(max(expected_degree / p, 0.0), 1.0)
    mask = np.tril(rng.random((p, p)) < prob, k=-1)
    w = np.where(mask, rng.uniform(low, high, size=(p, p)), 0.0)
    perm = rng.permutation(p)
    w = w[np.ix_(perm, perm)]
    return WeightedDigraph(w, kind="er_dag", seed=seed)


def generate_loop_graph(p, w_min=0.3, w_max=1.3, seed=0) -> WeightedDigraph:
    """Reciprocal chain 1 <-> 2 <-> ... <-> p-1 draining into sink node 0."""
    if int(p) != p or p < 3:
        raise ParameterError(f"loop graph needs p >= 3, got {p!r}")
    if not (0 < w_min < w_max) or not np.isfinite(w_max):
        raise ParameterError(f"need 0 < w_min < w_max, got ({w_min}, {w_max})")
    p = int(p)
    rng = np.random.default_rng(seed)
    w = np.zeros((p, p))
    for i in range(1, p - 1):
        w[i + 1, i] = rng.uniform(w_min, w_max)  # i -> i+1
        w[i, i + 1] = rng.uniform(w_min, w_max)  # i+1 -> i
    w[0, 1] = rng.uniform(w_min, w_max)
    w[0, p - 1] = rng.uniform(w_min, w_max)
    return WeightedDigraph(w, kind="loop", seed=seed)


def binarize(weights, threshold, include_diagonal=True) -> AdjacencyPattern:
    if threshold < 0:
        raise ParameterError(f"threshold must be nonnegative, got {threshold}")
    w = weights.weights if isinstance(weights, WeightedDigraph) else np.asarray(weights, dtype=float)
    return AdjacencyPattern(np.abs(w) > threshold, include_diagonal=include_diagonal)


def topological_order(present):
    """Kahn's algorithm on a boolean pattern; returns None if a cycle exists.

    Diagonal entries are ignored.
    """
    m = np.array(present, dtype=bool)
    np.fill_diagonal(m, False)
    p = m.shape[0]
    indeg = m.sum(axis=1)  # parents per node
    queue = deque(int(i) for i in np.flatnonzero(indeg == 0))
    order = []
    while queue:
        j = queue.popleft()
        order.append(j)
        for i in np.flatnonzero(m[:, j]):
            indeg[i] -= 1
            if indeg[i] == 0:
                queue.append(int(i))
    return order if len(order) == p else None


def is_acyclic(present) -> bool:
    return topological_order(present) is not None


def second_moment_generator(B, A):
    """Matrix of the linear ODE for vec(E[X X^T]) under diagonal multiplicative noise.

    d/dt S = B S + S B^T + diag(a_i^T S a_i) when the drift offset is zero.
    """
    B = np.asarray(B, dtype=float)
    A = np.asarray(A, dtype=float)
    p = B.shape[0]
    eye = np.eye(p)
    L = np.kron(B, eye) + np.kron(eye, B)
    for i in range(p):
        L[i * p + i, :] += np.kron(A[i], A[i])
    return L


def check_stability(drift, graph) -> StabilityReport:
    """Sufficient mean-square stability test ``2 mu_2(B) + ||A||_2^2 < 0``.

    ``drift`` may be an object exposing ``B`` or a bare matrix; ``graph`` a
    WeightedDigraph or a matrix. The exact second-moment abscissa is reported
    alongside for information.
    """
    B = np.asarray(getattr(drift, "B", drift), dtype=float)
    A = np.asarray(getattr(graph, "weights", graph), dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1] or A.shape != B.shape:
        raise ParameterError(f"dimension mismatch: B {B.shape}, A {A.shape}")
    mu = float(np.linalg.eigvalsh(0.5 * (B + B.T))[-1])
    a2 = float(np.linalg.norm(A, 2) ** 2) if A.size else 0.0
    margin = 2.0 * mu + a2
    abscissa = float(np.max(np.linalg.eigvals(second_moment_generator(B, A)).real))
    return StabilityReport(mu, a2, margin, bool(margin < 0), abscissa)


def save_graph(graph: WeightedDigraph, path):
    write_json(path, graph.to_dict())


def load_graph(path) -> WeightedDigraph:
    return WeightedDigraph.from_dict(read_json(path), path=Path(path))
