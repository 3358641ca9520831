"""Sharing structures: edge-colored layers, shared low-rank bases, layer colorings.

A coloring maps every layer index to a basis id. Layers with the same color
form a color class; permuting layers inside a class leaves the coloring
unchanged, so the coloring's symmetry group is the direct product of the
symmetric groups on the classes.

Layer indices are 0-based throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ParameterError
from .linalg import as_matrix, svd_truncated

BASIS_STRATEGIES = ("per-layer-svd", "mean-svd", "spectral-cluster")
EDGE_ACTIVATIONS = {
    "identity": lambda z: z,
    "tanh": np.tanh,
    "relu": lambda z: np.maximum(z, 0.0),
}


# -- single-layer edge coloring ------------------------------------------------


@dataclass(frozen=True)
class EdgeColoredLayer:
    """A bipartite layer whose edges draw their weight from a shared color table."""

    n_in: int
    n_out: int
    edges: tuple[tuple[int, int], ...]
    edge_color: Mapping[tuple[int, int], Hashable]
    theta: Mapping[Hashable, float]
    activation: str = "identity"

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ConfigurationError("layer needs at least one input and one output")
        if self.activation not in EDGE_ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        edges = tuple((int(n), int(m)) for n, m in self.edges)
        if len(set(edges)) != len(edges):
            raise ConfigurationError("duplicate edge")
        for n, m in edges:
            if not (0 <= n < self.n_in and 0 <= m < self.n_out):
                raise ConfigurationError(f"edge {(n, m)} outside the layer")
            if (n, m) not in self.edge_color:
                raise ConfigurationError(f"edge {(n, m)} has no color")
        used = {self.edge_color[e] for e in edges}
        unused = set(self.edge_color.values()) - used
        if unused or set(self.edge_color) - set(edges):
            raise ConfigurationError("edge_color mentions edges or colors not in the layer")
        object.__setattr__(self, "edges", edges)

    @property
    def colors(self) -> set:
        return {self.edge_color[e] for e in self.edges}

    @classmethod
    def from_dense(cls, w: np.ndarray, activation: str = "identity") -> "EdgeColoredLayer":
        """One color per edge of a complete bipartite graph, reproducing ``w`` exactly."""
        w = as_matrix(w, "W")
        m_out, n_in = w.shape
        edges = tuple((n, m) for m in range(m_out) for n in range(n_in))
        colors = {e: i for i, e in enumerate(edges)}
        theta = {i: float(w[m, n]) for i, (n, m) in enumerate(edges)}
        return cls(n_in, m_out, edges, colors, theta, activation)


def edge_shared_forward(layer: EdgeColoredLayer, x) -> np.ndarray:
    """``y_m = act(sum over edges (n, m) of theta[color(n, m)] * x_n)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.n_in,):
        raise ParameterError(f"expected input of length {layer.n_in}, got {x.shape}")
    pre = np.zeros(layer.n_out)
    for n, m in layer.edges:
        color = layer.edge_color[(n, m)]
        if color not in layer.theta:
            raise ConfigurationError(f"color {color!r} has no parameter")
        pre[m] += layer.theta[color] * x[n]
    return EDGE_ACTIVATIONS[layer.activation](pre)


# -- shared bases ------------------------------------------------------------------


@dataclass(frozen=True)
class SharedBasis:
    """Orthonormal factor pair; a client layer's weight is ``U @ S @ V.T``."""

    basis_id: int
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        u = as_matrix(self.U, "U")
        v = as_matrix(self.V, "V")
        if u.shape[1] != v.shape[1]:
            raise ParameterError("U and V must have the same rank")
        r = u.shape[1]
        if r > u.shape[0] or r > v.shape[0]:
            raise ParameterError("rank exceeds factor dimension")
        for name, f in (("U", u), ("V", v)):
            if np.max(np.abs(f.T @ f - np.eye(r))) > 1e-8:
                raise ParameterError(f"{name} columns are not orthonormal")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "U", u)
        object.__setattr__(self, "V", v)

    @property
    def rank(self) -> int:
        return int(self.U.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.U.shape[0]), int(self.V.shape[0]))


def _check_client(w: np.ndarray, basis: SharedBasis) -> np.ndarray:
    w = as_matrix(w, "W")
    if w.shape != basis.shape:
        raise ParameterError(f"W has shape {w.shape}, basis {basis.basis_id} expects {basis.shape}")
    return w


def fit_coefficient(w, basis: SharedBasis, diagonal: bool = False) -> np.ndarray:
    """Least-squares coefficient ``argmin_S |U S V^T - W|_F``.

    Orthonormal factors make this ``U^T W V``; the diagonal variant keeps only
    its diagonal, which is the least-squares optimum over diagonal ``S``.
    """
    w = _check_client(w, basis)
    s = basis.U.T @ w @ basis.V
    return np.diag(np.diag(s)) if diagonal else s


def reconstruct(basis: SharedBasis, s) -> np.ndarray:
    s = as_matrix(s, "S")
    if s.shape != (basis.rank, basis.rank):
        raise ParameterError(f"S must be {basis.rank}x{basis.rank}, got {s.shape}")
    return basis.U @ s @ basis.V.T


def _stack_group(weights: Sequence[np.ndarray]) -> list[np.ndarray]:
    if not weights:
        raise ParameterError("no weights given")
    ws = [as_matrix(w, f"W[{i}]") for i, w in enumerate(weights)]
    shapes = {w.shape for w in ws}
    if len(shapes) != 1:
        raise ParameterError(f"heterogeneous shapes in one group: {sorted(shapes)}")
    return ws


def _basis_from(w: np.ndarray, r: int, basis_id: int) -> SharedBasis:
    u, _, v = svd_truncated(w, r)
    return SharedBasis(basis_id, u, v)


def kmeans_layers(weights: Sequence[np.ndarray], k: int, max_iter: int = 100) -> np.ndarray:
    """Cluster labels from Lloyd iterations on vectorized weights.

    Centers start at layer 0 and then at the farthest remaining layer (lowest
    index on ties), so the result involves no randomness.
    """
    x = np.stack([np.asarray(w, dtype=np.float64).ravel() for w in weights])
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"cannot form {k} clusters from {n} layers")
    centers = [x[0]]
    for _ in range(1, k):
        d = np.min([np.sum((x - c) ** 2, axis=1) for c in centers], axis=0)
        centers.append(x[int(np.argmax(d))])
    centers = np.stack(centers)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(dist, axis=1)
        for c in range(k):
            if not np.any(new == c):
                # refill an empty cluster with the worst-fit layer
                worst = int(np.argmax(dist[np.arange(n), new]))
                new[worst] = c
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([x[labels == c].mean(axis=0) for c in range(k)])
    return labels


def build_candidate_bases(
    weights: Sequence[np.ndarray],
    k: int,
    r: int,
    strategy: str = "spectral-cluster",
    start_id: int = 0,
) -> list[SharedBasis]:
    """``k`` rank-``r`` candidate bases for one shape group.

    per-layer-svd
        top-``r`` singular subspaces of ``k`` evenly spaced seed layers.
    mean-svd
        layers split into ``k`` contiguous chunks; SVD of each chunk's mean.
    spectral-cluster
        k-means on the vectorized weights, then SVD of each cluster mean.
    """
    ws = _stack_group(weights)
    m, n = ws[0].shape
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ParameterError("K must be a positive integer")
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= min(m, n):
        raise ParameterError(f"rank {r} outside [1, {min(m, n)}]")
    if strategy not in BASIS_STRATEGIES:
        raise ParameterError(f"unknown basis strategy {strategy!r}")
    if k > len(ws) and strategy != "mean-svd":
        raise ParameterError(f"K={k} exceeds the {len(ws)} layers in the group")

    if strategy == "per-layer-svd":
        seeds = np.unique(np.round(np.linspace(0, len(ws) - 1, k)).astype(int))
        sources = [ws[i] for i in seeds]
    elif strategy == "mean-svd":
        if k > len(ws):
            raise ParameterError(f"K={k} exceeds the {len(ws)} layers in the group")
        chunks = np.array_split(np.arange(len(ws)), k)
        sources = [np.mean([ws[i] for i in c], axis=0) for c in chunks]
    else:
        labels = kmeans_layers(ws, k)
        sources = [np.mean([ws[i] for i in np.flatnonzero(labels == c)], axis=0) for c in range(k)]
    return [_basis_from(src, r, start_id + i) for i, src in enumerate(sources)]


def group_by_shape(shapes: Sequence[tuple[int, int]]) -> dict[tuple[int, int], list[int]]:
    """Layer indices per exact shape, in first-appearance order."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(shapes):
        groups.setdefault(tuple(s), []).append(i)
    return groups


def build_bases_by_group(
    weights: Sequence[np.ndarray], k: int, r: int, strategy: str = "spectral-cluster"
) -> list[SharedBasis]:
    """Candidate bases for every shape group, with globally unique ids."""
    pool: list[SharedBasis] = []
    for _, idx in group_by_shape([np.shape(w) for w in weights]).items():
        group = [weights[i] for i in idx]
        pool.extend(build_candidate_bases(group, min(k, len(group)), r, strategy, start_id=len(pool)))
    return pool


# -- colorings ---------------------------------------------------------------------


@dataclass(frozen=True)
class Coloring:
    """Total map from layer index to basis id."""

    assignment: tuple[int, ...]
    basis_ids: frozenset = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        assignment = tuple(int(b) for b in self.assignment)
        if not assignment:
            raise ConfigurationError("a coloring needs at least one layer")
        ids = frozenset(assignment) if self.basis_ids is None else frozenset(int(b) for b in self.basis_ids)
        missing = set(assignment) - ids
        if missing:
            raise ConfigurationError(f"assignment references unknown basis ids {sorted(missing)}")
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "basis_ids", ids)

    @property
    def n_layers(self) -> int:
        return len(self.assignment)

    def __call__(self, layer: int) -> int:
        return self.assignment[layer]

    def indicator(self) -> np.ndarray:
        """``A[l, j] = 1`` iff layer ``l`` uses the ``j``-th basis id in sorted order."""
        ids = sorted(self.basis_ids)
        col = {b: j for j, b in enumerate(ids)}
        a = np.zeros((self.n_layers, len(ids)), dtype=np.int64)
        for layer, b in enumerate(self.assignment):
            a[layer, col[b]] = 1
        return a

    def edges(self) -> list[tuple[int, int]]:
        """Edge set of the layer-basis bipartite graph."""
        return [(layer, b) for layer, b in enumerate(self.assignment)]

    def to_json(self, rank: int, basis_strategy: str, seed: int) -> str:
        obj = {
            "layers": self.n_layers,
            "assignment": list(self.assignment),
            "rank": int(rank),
            "basis_strategy": basis_strategy,
            "seed": int(seed),
        }
        return json.dumps(obj)

    @classmethod
    def from_json(cls, text: str) -> tuple["Coloring", dict]:
        obj = json.loads(text)
        coloring = cls(tuple(obj["assignment"]))
        if coloring.n_layers != obj["layers"]:
            raise ConfigurationError("'layers' disagrees with the assignment length")
        return coloring, {k: obj[k] for k in ("rank", "basis_strategy", "seed")}


@dataclass(frozen=True)
class ColorClasses:
    classes: dict[int, tuple[int, ...]]
    automorphism_order: int
    factor_sizes: tuple[int, ...]

    def describe(self) -> str:
        """Direct-product notation such as ``S3 x S1 x S1``."""
        return " x ".join(f"S{k}" for k in self.factor_sizes)


def color_classes(coloring: Coloring, n_layers: int | None = None) -> ColorClasses:
    if n_layers is not None and n_layers != coloring.n_layers:
        raise ConfigurationError(f"coloring covers {coloring.n_layers} layers, expected {n_layers}")
    classes: dict[int, list[int]] = {}
    for layer, b in enumerate(coloring.assignment):
        classes.setdefault(b, []).append(layer)
    sizes = tuple(sorted((len(v) for v in classes.values()), reverse=True))
    order = math.prod(math.factorial(s) for s in sizes)
    return ColorClasses({b: tuple(v) for b, v in sorted(classes.items())}, order, sizes)


def check_automorphism(coloring: Coloring, pi: Sequence[int]) -> bool:
    """True iff ``coloring(pi[l]) == coloring(l)`` for every layer ``l``."""
    pi = [int(p) for p in pi]
    if sorted(pi) != list(range(coloring.n_layers)):
        raise ParameterError(f"{pi} is not a permutation of 0..{coloring.n_layers - 1}")
    return all(coloring(pi[layer]) == coloring(layer) for layer in range(coloring.n_layers))


# -- storage accounting ----------------------------------------------------------


def _basis_shapes(shapes: Sequence[tuple[int, int]], coloring: Coloring) -> dict[int, tuple[int, int]]:
    if len(shapes) != coloring.n_layers:
        raise ParameterError("one shape per layer is required")
    out: dict[int, tuple[int, int]] = {}
    for layer, b in enumerate(coloring.assignment):
        s = tuple(int(d) for d in shapes[layer])
        if out.setdefault(b, s) != s:
            raise ParameterError(f"basis {b} serves layers of shapes {out[b]} and {s}")
    return out


def dense_parameter_count(shapes: Sequence[tuple[int, int]]) -> int:
    return sum(int(m) * int(n) for m, n in shapes)


def shared_parameter_count(
    shapes: Sequence[tuple[int, int]], coloring: Coloring, r: int, diagonal: bool = False
) -> int:
    """Scalars stored under strict sharing: each used basis once, one coefficient per layer."""
    per_basis = _basis_shapes(shapes, coloring)
    for m, n in per_basis.values():
        if r < 1 or r > min(m, n):
            raise ParameterError(f"rank {r} infeasible for shape {(m, n)}")
    factors = sum((m + n) * r for m, n in per_basis.values())
    coeffs = coloring.n_layers * (r if diagonal else r * r)
    return factors + coeffs


def compression_ratio(
    shapes: Sequence[tuple[int, int]], coloring: Coloring, r: int, diagonal: bool = False
) -> float:
    """``1 - shared / dense`` parameter count; infeasible (negative) ratios raise."""
    shared = shared_parameter_count(shapes, coloring, r, diagonal)
    dense = dense_parameter_count(shapes)
    if shared > dense:
        raise ParameterError(
            f"rank {r} stores {shared} scalars for {dense} dense ones; no compression possible"
        )
    return 1.0 - shared / dense


@dataclass
class StrictSharedStorage:
    """Materialized strict-sharing model: the only arrays a deployment would keep."""

    factors: dict[int, tuple[np.ndarray, np.ndarray]]
    coefficients: list[np.ndarray]
    assignment: tuple[int, ...]

    @classmethod
    def build(
        cls,
        weights: Sequence[np.ndarray],
        bases: Iterable[SharedBasis],
        coloring: Coloring,
        diagonal: bool = False,
    ) -> "StrictSharedStorage":
        pool = {b.basis_id: b for b in bases}
        factors = {}
        coeffs = []
        for layer, b in enumerate(coloring.assignment):
            basis = pool[b]
            factors.setdefault(b, (basis.U.copy(), basis.V.copy()))
            s = fit_coefficient(weights[layer], basis, diagonal)
            coeffs.append(np.diag(s).copy() if diagonal else s)
        return cls(factors, coeffs, coloring.assignment)

    def stored_scalars(self) -> int:
        total = 0
        for u, v in self.factors.values():
            total += u.size + v.size
        for s in self.coefficients:
            total += s.size
        return total

    def materialize(self) -> list[np.ndarray]:
        out = []
        for b, s in zip(self.assignment, self.coefficients):
            u, v = self.factors[b]
            out.append(u @ (np.diag(s) if s.ndim == 1 else s) @ v.T)
        return out
