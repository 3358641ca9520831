"""Dense linear algebra and matrix-free extreme eigenpairs.

Matrices are plain 2-D ``float64`` numpy arrays. Symmetric operators are
wrapped in :class:`SymmetricOperator` so that Hessians can be handled without
ever being materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, ParameterError

__all__ = [
    "EigenPairs",
    "SymmetricOperator",
    "as_matrix",
    "canonical_signs",
    "l2_clip",
    "lanczos_top_eigs",
    "operator_asymmetry",
    "subspace_angles",
    "svd_truncated",
    "sym_eig_dense",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise :class:`DataError`."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ParameterError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def canonical_signs(vectors: np.ndarray, *others: np.ndarray) -> tuple[np.ndarray, ...]:
    """Flip column signs so the first significant entry of each column is positive.

    Any additional arrays in ``others`` get the same column flips (used to keep
    ``U`` and ``V`` of an SVD consistent).
    """
    vecs = np.array(vectors, dtype=np.float64, copy=True)
    outs = [np.array(o, dtype=np.float64, copy=True) for o in others]
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        scale = np.max(np.abs(col)) if col.size else 0.0
        if scale == 0.0:
            continue
        idx = np.flatnonzero(np.abs(col) > 1e-10 * scale)[0]
        if col[idx] < 0:
            vecs[:, j] = -col
            for o in outs:
                o[:, j] = -o[:, j]
    return (vecs, *outs)


def svd_truncated(a, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best rank-``r`` factorization ``A ~ U diag(sigma) V^T``.

    Returns ``U`` (M x r), ``sigma`` (r,), ``V`` (N x r), both factors with
    orthonormal columns. The zero matrix yields zero singular values and the
    leading canonical axis vectors as factors.
    """
    a = as_matrix(a, "A")
    m, n = a.shape
    if not isinstance(r, (int, np.integer)) or r < 1 or r > min(m, n):
        raise ParameterError(f"rank r={r} outside [1, {min(m, n)}]")
    if not np.any(a):
        eye_m = np.eye(m)[:, :r]
        eye_n = np.eye(n)[:, :r]
        return eye_m, np.zeros(r), eye_n
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    u, v = canonical_signs(u[:, :r], vt[:r].T)
    return u, s[:r].copy(), v


@dataclass(frozen=True)
class EigenPairs:
    """Eigenvalue estimates in descending order with orthonormal eigenvector columns."""

    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        residuals = np.asarray(self.residuals, dtype=np.float64)
        converged = (
            np.ones(values.shape, dtype=bool)
            if self.converged is None
            else np.asarray(self.converged, dtype=bool)
        )
        if vectors.ndim != 2 or vectors.shape[1] != values.shape[0]:
            raise ParameterError("one eigenvector column is required per eigenvalue")
        if residuals.shape != values.shape or converged.shape != values.shape:
            raise ParameterError("residuals/converged must match values")
        for arr in (values, vectors, residuals, converged):
            arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "residuals", residuals)
        object.__setattr__(self, "converged", converged)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    def head(self, k: int) -> "EigenPairs":
        return EigenPairs(
            self.values[:k], self.vectors[:, :k], self.residuals[:k], self.converged[:k]
        )


@dataclass(frozen=True)
class SymmetricOperator:
    """A linear symmetric map given only through its action on vectors."""

    dimension: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise ParameterError("operator dimension must be positive")

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dimension,):
            raise ParameterError(f"expected vector of length {self.dimension}, got {v.shape}")
        return np.asarray(self.apply(v), dtype=np.float64)

    @classmethod
    def from_matrix(cls, a) -> "SymmetricOperator":
        a = as_matrix(a, "operator matrix")
        if a.shape[0] != a.shape[1]:
            raise ParameterError("operator matrix must be square")
        return cls(a.shape[0], lambda v: a @ v)

    def to_dense(self, symmetrize: bool = True) -> np.ndarray:
        """Materialize by probing every canonical basis vector."""
        n = self.dimension
        cols = np.empty((n, n))
        e = np.zeros(n)
        for i in range(n):
            e[i] = 1.0
            cols[:, i] = self(e)
            e[i] = 0.0
        return 0.5 * (cols + cols.T) if symmetrize else cols


def operator_asymmetry(op: SymmetricOperator, n_pairs: int = 20, seed: int = 0) -> float:
    """Largest normalized ``|<Av,w> - <v,Aw>|`` over random vector pairs.

    Normalization is ``|v||w| * max(|Av|/|v|, |Aw|/|w|)``, a cheap stand-in for
    the operator norm.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        v = rng.standard_normal(op.dimension)
        w = rng.standard_normal(op.dimension)
        av, aw = op(v), op(w)
        nv, nw = np.linalg.norm(v), np.linalg.norm(w)
        scale = nv * nw * max(np.linalg.norm(av) / nv, np.linalg.norm(aw) / nw)
        if scale == 0.0:
            continue
        worst = max(worst, abs(av @ w - v @ aw) / scale)
    return worst


def sym_eig_dense(h) -> EigenPairs:
    """Full eigendecomposition of a dense symmetric matrix, values descending."""
    h = as_matrix(h, "H")
    if h.shape[0] != h.shape[1]:
        raise ParameterError("H must be square")
    norm = np.linalg.norm(h)
    if np.linalg.norm(h - h.T) > 1e-10 * max(norm, np.finfo(float).tiny):
        raise DataError("H is not symmetric to 1e-10 relative")
    hs = 0.5 * (h + h.T)
    vals, vecs = np.linalg.eigh(hs)
    vals = vals[::-1].copy()
    (vecs,) = canonical_signs(vecs[:, ::-1])
    residuals = np.linalg.norm(hs @ vecs - vecs * vals, axis=0)
    return EigenPairs(vals, vecs, residuals)


def _sort_key(values: np.ndarray, which: str) -> np.ndarray:
    if which == "largest":
        return values
    if which == "magnitude":
        return np.abs(values)
    raise ParameterError(f"unknown eigenvalue selection {which!r}")


def _krylov_run(op, locked, rng, max_iters, tol, k_needed, which):
    """One Lanczos pass with full reorthogonalization, deflated against ``locked``.

    Returns Ritz values, Ritz vectors and residual estimates for the whole
    Krylov space that was built.
    """
    n = op.dimension
    m_max = min(max_iters, n - locked.shape[1])
    q = rng.standard_normal(n)
    for _ in range(2):
        q -= locked @ (locked.T @ q)
    q /= np.linalg.norm(q)

    basis = np.zeros((n, m_max))
    alphas: list[float] = []
    betas: list[float] = []
    q_prev = np.zeros(n)
    beta_prev = 0.0
    for j in range(m_max):
        basis[:, j] = q
        w = op(q)
        alpha = float(q @ w)
        w = w - alpha * q - beta_prev * q_prev
        for _ in range(2):
            w -= basis[:, : j + 1] @ (basis[:, : j + 1].T @ w)
            if locked.shape[1]:
                w -= locked @ (locked.T @ w)
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)
        m = j + 1

        t_mat = np.diag(alphas) + np.diag(betas, 1) + np.diag(betas, -1)
        theta, y = np.linalg.eigh(t_mat)
        scale = max(np.max(np.abs(t_mat)), beta)
        invariant = beta <= 1e-13 * scale or scale == 0.0
        est = np.zeros(m) if invariant else beta * np.abs(y[-1, :])
        order = np.argsort(-_sort_key(theta, which), kind="stable")
        k = min(k_needed, m)
        if invariant or m == m_max or (m >= k_needed and np.all(est[order[:k]] <= 0.5 * tol)):
            break
        betas.append(beta)
        q_prev, q, beta_prev = q, w / beta, beta

    ritz = basis[:, :m] @ y
    return theta[order], ritz[:, order], est[order]


def lanczos_top_eigs(
    op: SymmetricOperator,
    t: int,
    max_iters: int | None = None,
    tol: float = 1e-9,
    *,
    seed: int = 0,
    which: str = "largest",
    max_restarts: int | None = None,
) -> EigenPairs:
    """Top-``t`` eigenpairs of a symmetric operator by Lanczos iteration.

    Every pass keeps all Krylov vectors and reorthogonalizes against them.
    Converged Ritz pairs are locked, and further passes are started from fresh
    random vectors in their orthogonal complement. That is what recovers
    eigenspaces of multiplicity > 1, which a single Krylov sequence cannot see.
    Passes stop once a pass contributes nothing to the current top ``t``.

    ``which`` is ``"largest"`` (algebraic) or ``"magnitude"``. Pairs whose
    explicit residual ``|Av - lv|`` exceeds ``tol`` are returned with
    ``converged=False`` rather than raising.
    """
    n = op.dimension
    if not isinstance(t, (int, np.integer)) or t < 1 or t > n:
        raise ParameterError(f"t={t} outside [1, {n}]")
    if max_iters is None:
        max_iters = min(n, max(10 * t, t + 100))
    if max_iters < t:
        raise ParameterError(f"max_iters={max_iters} must be >= t={t}")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    if max_restarts is None:
        max_restarts = t + 1
    _sort_key(np.zeros(1), which)

    rng = np.random.default_rng(seed)
    pool_vals: list[float] = []
    pool_vecs: list[np.ndarray] = []
    fallback = (np.empty(0), np.empty((n, 0)))
    for _ in range(max_restarts + 1):
        locked = np.column_stack(pool_vecs) if pool_vecs else np.empty((n, 0))
        if locked.shape[1] >= n:
            break
        theta, vecs, est = _krylov_run(op, locked, rng, max_iters, tol, t, which)
        conv = est <= 0.5 * tol
        fallback = (theta[~conv], vecs[:, ~conv])
        keys = _sort_key(np.asarray(pool_vals), which)
        kth = np.sort(keys)[::-1][t - 1] if len(pool_vals) >= t else -np.inf
        new_keys = _sort_key(theta[conv], which)
        pool_vals.extend(theta[conv].tolist())
        pool_vecs.extend(vecs[:, conv].T)
        if not np.any(new_keys > kth):
            break

    vals = np.asarray(pool_vals)
    vecs = np.column_stack(pool_vecs) if pool_vecs else np.empty((n, 0))
    if vals.size < t:
        need = t - vals.size
        vals = np.concatenate([vals, fallback[0][:need]])
        vecs = np.column_stack([vecs, fallback[1][:, :need]])
    order = np.argsort(-_sort_key(vals, which), kind="stable")[:t]
    vals, vecs = vals[order], vecs[:, order]
    (vecs,) = canonical_signs(vecs)
    residuals = np.array([np.linalg.norm(op(vecs[:, i]) - vals[i] * vecs[:, i]) for i in range(len(vals))])
    return EigenPairs(vals, vecs, residuals, residuals <= tol)


def subspace_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between the column spans of ``a`` and ``b``.

    Computed from sines so that angles near zero keep full relative accuracy.
    """
    qa, _ = np.linalg.qr(np.asarray(a, dtype=np.float64))
    qb, _ = np.linalg.qr(np.asarray(b, dtype=np.float64))
    if qb.shape[1] > qa.shape[1]:
        qa, qb = qb, qa
    sines = np.linalg.svd(qb - qa @ (qa.T @ qb), compute_uv=False)
    return np.arcsin(np.clip(np.sort(sines), 0.0, 1.0))


def l2_clip(x, tau: float) -> np.ndarray:
    """Scale ``x`` onto the L2 ball of radius ``tau`` if it lies outside."""
    if tau < 0 or np.isnan(tau):
        raise ParameterError(f"tau must be non-negative, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    if norm <= tau:
        return x.copy()
    return x * (tau / norm)
