"""Curvature-aligned basis selection and weight update.

For every layer: pick the candidate basis whose sharing perturbation has the
least energy in the layer Hessian's top-``t`` eigenspace, drop that
high-curvature component, clip the rest to ``beta * |W|_F`` and add it to
``W``.

Two output modes exist because the update ``W + clipped delta`` still stores
the full ``W``:

paper-literal
    ``W_hat = W + clip(delta_par)``, the update rule exactly.
strict-sharing
    ``W_hat = U S V^T``; only shared factors and coefficients are kept, so the
    compression ratio is actually realized.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .curvature import (
    POLICIES,
    SELECTIONS,
    MinorAxisBundle,
    decompose,
    minor_axes,
    quadratic_cost,
)
from .errors import ParameterError
from .linalg import SymmetricOperator, l2_clip
from .sharing import (
    Coloring,
    SharedBasis,
    compression_ratio,
    fit_coefficient,
    reconstruct,
)

MODES = ("paper-literal", "strict-sharing")
TIE_BREAKS = ("lowest-id",)

HessianSource = Callable[[int], SymmetricOperator]


@dataclass(frozen=True)
class AlignConfig:
    t: int = 550
    beta: float = 5e-2
    mode: str = "strict-sharing"
    tie_break: str = "lowest-id"
    which: str = "largest"
    policy: str = "best-effort"
    dense_threshold: int = 300
    lanczos_max_iters: int | None = None
    lanczos_tol: float = 1e-9
    diagonal: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.t < 1:
            raise ParameterError("t must be >= 1")
        if not self.beta > 0:
            raise ParameterError("beta must be > 0")
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}")
        if self.tie_break not in TIE_BREAKS:
            raise ParameterError(f"unknown tie break {self.tie_break!r}")
        if self.which not in SELECTIONS:
            raise ParameterError(f"unknown eigenvalue selection {self.which!r}")
        if self.policy not in POLICIES:
            raise ParameterError(f"unknown policy {self.policy!r}")

    def effective_t(self, dimension: int) -> int:
        """``t`` capped at ``dimension - 1`` so some low-curvature room remains."""
        return max(1, min(self.t, dimension - 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AlignConfig":
        return cls(**d)


@dataclass
class LayerAlignment:
    layer: int
    chosen_basis: int
    coefficient: np.ndarray
    delta_star: np.ndarray
    delta_par: np.ndarray
    delta_par_clipped: np.ndarray
    tau: float
    aligned_weight: np.ndarray
    realized_delta: np.ndarray
    perp_energy_per_candidate: dict[int, float] = field(default_factory=dict)

    @property
    def pre_clip_exceeds_tau(self) -> bool:
        return bool(np.linalg.norm(self.delta_par) > self.tau)


def candidate_delta(w, basis: SharedBasis, diagonal: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares coefficient and the flattened sharing perturbation ``U S V^T - W``."""
    w = np.asarray(w, dtype=np.float64)
    s = fit_coefficient(w, basis, diagonal)
    return s, (reconstruct(basis, s) - w).ravel()


def select_basis(
    w,
    bases: Sequence[SharedBasis],
    bundle: MinorAxisBundle,
    tie_break: str = "lowest-id",
    diagonal: bool = False,
) -> tuple[int, dict[int, float]]:
    """Basis id with the least high-curvature perturbation energy, plus all energies."""
    if not bases:
        raise ParameterError("no candidate bases")
    if tie_break not in TIE_BREAKS:
        raise ParameterError(f"unknown tie break {tie_break!r}")
    energies = {}
    for basis in bases:
        _, delta = candidate_delta(w, basis, diagonal)
        energies[basis.basis_id] = decompose(delta, bundle).energy_perp
    best = None
    for b in sorted(energies):
        if best is None or energies[b] < energies[best]:
            best = b
    return best, energies


def align_layer(
    w,
    basis: SharedBasis,
    bundle: MinorAxisBundle,
    beta: float,
    mode: str = "paper-literal",
    diagonal: bool = False,
) -> LayerAlignment:
    """Aligned weight for one layer given its chosen basis."""
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    if beta < 0:
        raise ParameterError("beta must be non-negative")
    w = np.asarray(w, dtype=np.float64)
    s, delta = candidate_delta(w, basis, diagonal)
    split = decompose(delta, bundle)
    tau = beta * float(np.linalg.norm(w))
    clipped = l2_clip(split.delta_par, tau)
    if mode == "paper-literal":
        aligned = w + clipped.reshape(w.shape)
    else:
        aligned = reconstruct(basis, s)
    return LayerAlignment(
        layer=bundle.layer,
        chosen_basis=basis.basis_id,
        coefficient=s,
        delta_star=delta,
        delta_par=split.delta_par,
        delta_par_clipped=clipped,
        tau=tau,
        aligned_weight=aligned,
        realized_delta=(aligned - w).ravel(),
        perp_energy_per_candidate={basis.basis_id: split.energy_perp},
    )


def compute_bundles(
    weights: Sequence[np.ndarray], config: AlignConfig, hessian_source: HessianSource
) -> list[MinorAxisBundle]:
    """Minor axes for every layer with the configured ``t`` cap and solver."""
    bundles = []
    for layer, w in enumerate(weights):
        op = hessian_source(layer)
        if op.dimension != np.size(w):
            raise ParameterError(f"layer {layer}: Hessian dimension {op.dimension} != {np.size(w)}")
        bundles.append(
            minor_axes(
                op,
                config.effective_t(op.dimension),
                layer=layer,
                dense_threshold=config.dense_threshold,
                max_iters=config.lanczos_max_iters,
                tol=config.lanczos_tol,
                seed=config.seed + layer,
                which=config.which,
                policy=config.policy,
            )
        )
    return bundles


def truncate_bundle(bundle: MinorAxisBundle, t: int) -> MinorAxisBundle:
    """Leading ``t`` axes of an existing bundle (nested subspaces for sweeps)."""
    if not 1 <= t <= bundle.t:
        raise ParameterError(f"t={t} outside [1, {bundle.t}]")
    return replace(
        bundle,
        vectors=bundle.vectors[:, :t],
        eigenvalues=bundle.eigenvalues[:t],
        residuals=bundle.residuals[:t],
        requested_t=t,
    )


def _finite(x: float | None):
    if x is None or not math.isfinite(x):
        return None
    return float(x)


@dataclass
class AlignmentReport:
    layers: list[dict]
    coloring: list[int]
    mode: str
    compression_ratio: float | None
    total_perp_energy: float
    surrogate_cost_before: float
    surrogate_cost_after: float
    loss_before: float | None
    loss_after: float | None
    config: dict
    seed: int

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "coloring": list(self.coloring),
            "mode": self.mode,
            "compression_ratio": _finite(self.compression_ratio),
            "total_perp_energy": self.total_perp_energy,
            "surrogate_cost_before": self.surrogate_cost_before,
            "surrogate_cost_after": self.surrogate_cost_after,
            "loss_before": _finite(self.loss_before),
            "loss_after": _finite(self.loss_after),
            "config": self.config,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def geo_share(
    weights: Sequence[np.ndarray],
    bases: Sequence[SharedBasis],
    config: AlignConfig,
    hessian_source: HessianSource | None = None,
    *,
    bundles: Sequence[MinorAxisBundle] | None = None,
    loss_fn: Callable[[list[np.ndarray]], float] | None = None,
    fixed_coloring: Coloring | None = None,
) -> tuple[Coloring, list[np.ndarray], AlignmentReport]:
    """Select a basis per layer and build the aligned weights.

    Candidates for a layer are the bases whose factor shapes match it. Pass
    ``bundles`` to reuse minor axes across runs, and ``fixed_coloring`` to
    skip selection and align under a given assignment (baselines). ``loss_fn``
    maps a list of weights to a scalar loss for the before/after fields.
    """
    weights = [np.asarray(w, dtype=np.float64) for w in weights]
    if bundles is None:
        if hessian_source is None:
            raise ParameterError("need a Hessian source or precomputed bundles")
        bundles = compute_bundles(weights, config, hessian_source)
    if len(bundles) != len(weights):
        raise ParameterError("one minor-axis bundle per layer is required")
    pool = {b.basis_id: b for b in bases}
    if len(pool) != len(bases):
        raise ParameterError("duplicate basis ids in the pool")
    if fixed_coloring is not None and fixed_coloring.n_layers != len(weights):
        raise ParameterError("fixed coloring does not cover every layer")

    records, aligned, assignment = [], [], []
    ops = [hessian_source(i) for i in range(len(weights))] if hessian_source is not None else None
    total_perp = cost_before = cost_after = 0.0
    for layer, (w, bundle) in enumerate(zip(weights, bundles)):
        candidates = [b for b in bases if b.shape == w.shape]
        if not candidates:
            raise ParameterError(f"layer {layer}: no basis matches shape {w.shape}")
        best, energies = select_basis(w, candidates, bundle, config.tie_break, config.diagonal)
        if fixed_coloring is not None:
            best = fixed_coloring(layer)
            if best not in energies:
                raise ParameterError(f"layer {layer}: basis {best} does not fit shape {w.shape}")
        result = align_layer(w, pool[best], bundle, config.beta, config.mode, config.diagonal)
        result.perp_energy_per_candidate = energies
        total_perp += energies[best]
        rec = {
            "layer": layer,
            "chosen_basis": best,
            "energies": {str(b): energies[b] for b in sorted(energies)},
            "tau": result.tau,
            "norm_delta_star": float(np.linalg.norm(result.delta_star)),
            "norm_delta_par": float(np.linalg.norm(result.delta_par)),
            "norm_delta_par_clipped": float(np.linalg.norm(result.delta_par_clipped)),
            "pre_clip_exceeds_tau": result.pre_clip_exceeds_tau,
            "t_effective": bundle.t,
            "t_requested": config.t,
            "eig_method": bundle.method,
        }
        if ops is not None:
            before = quadratic_cost(result.delta_star, ops[layer])
            after = quadratic_cost(result.realized_delta, ops[layer])
            rec["surrogate_cost_before"] = before
            rec["surrogate_cost_after"] = after
            cost_before += before
            cost_after += after
        records.append(rec)
        aligned.append(result.aligned_weight)
        assignment.append(best)

    coloring = Coloring(tuple(assignment), frozenset(pool))
    ratio = None
    if config.mode == "strict-sharing":
        ranks = {pool[b].rank for b in set(assignment)}
        if len(ranks) == 1:
            ratio = compression_ratio([w.shape for w in weights], coloring, ranks.pop(), config.diagonal)
    loss_before = loss_fn(list(weights)) if loss_fn is not None else None
    loss_after = loss_fn(aligned) if loss_fn is not None else None
    report = AlignmentReport(
        layers=records,
        coloring=list(assignment),
        mode=config.mode,
        compression_ratio=ratio,
        total_perp_energy=total_perp,
        surrogate_cost_before=cost_before,
        surrogate_cost_after=cost_after,
        loss_before=loss_before,
        loss_after=loss_after,
        config=config.to_dict(),
        seed=config.seed,
    )
    return coloring, aligned, report
