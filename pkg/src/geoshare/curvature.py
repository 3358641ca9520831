"""Second-order geometry of sharing perturbations.

The loss change caused by a weight perturbation ``delta`` is modeled by the
quadratic ``0.5 * delta^T H delta``. The top-``t`` eigenvectors of ``H`` (the
minor axes of the level-set ellipsoid) span the high-curvature subspace;
``delta`` splits into its projection there and the low-curvature remainder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ParameterError
from .linalg import EigenPairs, SymmetricOperator, lanczos_top_eigs, sym_eig_dense

SELECTIONS = ("largest", "magnitude")
POLICIES = ("best-effort", "strict")


@dataclass(frozen=True)
class MinorAxisBundle:
    """Orthonormal top-curvature directions of one layer's Hessian."""

    layer: int
    vectors: np.ndarray
    eigenvalues: np.ndarray
    residuals: np.ndarray
    requested_t: int
    method: str = "dense"

    @property
    def t(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[0])


@dataclass(frozen=True)
class PerturbationSplit:
    delta: np.ndarray
    delta_par: np.ndarray
    delta_perp: np.ndarray

    @property
    def energy_perp(self) -> float:
        return float(self.delta_perp @ self.delta_perp)

    @property
    def energy_par(self) -> float:
        return float(self.delta_par @ self.delta_par)


def _top_by(eigs: EigenPairs, t: int, which: str) -> EigenPairs:
    if which == "largest":
        return eigs.head(t)
    order = np.argsort(-np.abs(eigs.values), kind="stable")[:t]
    return EigenPairs(eigs.values[order], eigs.vectors[:, order], eigs.residuals[order], eigs.converged[order])


def minor_axes(
    hessian_op: SymmetricOperator,
    t: int,
    *,
    layer: int = 0,
    method: str = "auto",
    dense_threshold: int = 300,
    max_iters: int | None = None,
    tol: float = 1e-9,
    seed: int = 0,
    which: str = "largest",
    policy: str = "best-effort",
) -> MinorAxisBundle:
    """Top-``t`` eigenvectors of a layer Hessian.

    ``method="auto"`` materializes the operator (one exact HVP per coordinate)
    and diagonalizes it when the dimension is at most ``dense_threshold``, and
    runs Lanczos otherwise. Under ``policy="best-effort"`` unconverged Lanczos
    pairs are dropped and the bundle's ``t`` shrinks accordingly; ``"strict"``
    raises :class:`ConvergenceError` instead.
    """
    n = hessian_op.dimension
    if not isinstance(t, (int, np.integer)) or not 1 <= t <= n:
        raise ParameterError(f"t={t} outside [1, {n}]")
    if which not in SELECTIONS:
        raise ParameterError(f"unknown selection {which!r}")
    if policy not in POLICIES:
        raise ParameterError(f"unknown policy {policy!r}")
    if method == "auto":
        method = "dense" if n <= dense_threshold else "lanczos"
    if method == "dense":
        eigs = _top_by(sym_eig_dense(hessian_op.to_dense()), t, which)
    elif method == "lanczos":
        eigs = lanczos_top_eigs(hessian_op, t, max_iters, tol, seed=seed, which=which)
    else:
        raise ParameterError(f"unknown method {method!r}")

    keep = eigs.converged
    if not np.all(keep):
        if policy == "strict":
            bad = int(np.sum(~keep))
            raise ConvergenceError(f"layer {layer}: {bad} of {t} eigenpairs unconverged", layer=layer)
        if not np.any(keep):
            raise ConvergenceError(f"layer {layer}: no eigenpair converged", layer=layer)
    return MinorAxisBundle(
        layer=layer,
        vectors=np.array(eigs.vectors[:, keep]),
        eigenvalues=np.array(eigs.values[keep]),
        residuals=np.array(eigs.residuals[keep]),
        requested_t=int(t),
        method=method,
    )


def decompose(delta, bundle: MinorAxisBundle) -> PerturbationSplit:
    """Split ``delta`` into its high-curvature projection and the remainder."""
    delta = np.asarray(delta, dtype=np.float64).ravel()
    if delta.shape != (bundle.dimension,):
        raise ParameterError(f"delta has length {delta.size}, bundle dimension is {bundle.dimension}")
    p = bundle.vectors
    perp = p @ (p.T @ delta)
    return PerturbationSplit(delta, delta - perp, perp)


def quadratic_cost(delta, hessian_op: SymmetricOperator) -> float:
    """Second-order loss-change surrogate ``0.5 * delta^T H delta``."""
    delta = np.asarray(delta, dtype=np.float64).ravel()
    return 0.5 * float(delta @ hessian_op(delta))


def energy_split_check(split: PerturbationSplit, hessian_op: SymmetricOperator) -> tuple[float, float, float]:
    """``(par^T H par, perp^T H perp, 2 par^T H perp)``.

    The cross term vanishes for exact eigenvectors; for approximate ones it is
    the diagnostic of how far the two-term energy split is from exact.
    """
    h_par = hessian_op(split.delta_par)
    h_perp = hessian_op(split.delta_perp)
    return (
        float(split.delta_par @ h_par),
        float(split.delta_perp @ h_perp),
        float(split.delta_par @ h_perp + split.delta_perp @ h_par),
    )


def first_order_ratio(grad, delta, hessian_op: SymmetricOperator) -> float:
    """``2 |g^T delta| / |delta^T H delta|``; ``inf`` when the quadratic term is zero."""
    grad = np.asarray(grad, dtype=np.float64).ravel()
    delta = np.asarray(delta, dtype=np.float64).ravel()
    if grad.shape != delta.shape:
        raise ParameterError("gradient and delta lengths differ")
    quad = abs(float(delta @ hessian_op(delta)))
    if quad == 0.0:
        return math.inf
    return 2.0 * abs(float(grad @ delta)) / quad


@dataclass(frozen=True)
class EllipsoidAxis:
    direction: np.ndarray
    eigenvalue: float
    length: float

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.length)


def ellipsoid_axes(eigs: EigenPairs, level: float) -> list[EllipsoidAxis]:
    """Semi-axes ``sqrt(2 c / lambda_i)`` of ``{x : 0.5 x^T H x = c}``.

    Non-positive eigenvalues give unbounded axes (``length = inf``).
    """
    if level <= 0:
        raise ParameterError("level must be positive")
    axes = []
    for i, lam in enumerate(eigs.values):
        length = math.sqrt(2.0 * level / lam) if lam > 0 else math.inf
        axes.append(EllipsoidAxis(np.array(eigs.vectors[:, i]), float(lam), length))
    return axes
