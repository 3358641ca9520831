"""Desk-scale experiments: synthetic data, toy training, sharing runs, oracle suites.

Every random draw derives from the experiment's single integer seed through
``numpy.random.SeedSequence``, so a config plus a seed reproduces a report
byte for byte. Wall-clock timings are returned separately from reports for the
same reason.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .aligner import MODES, AlignConfig, compute_bundles, geo_share, truncate_bundle
from .curvature import decompose, first_order_ratio
from .errors import ConfigurationError, NumericError, ParameterError
from .linalg import lanczos_top_eigs, subspace_angles, sym_eig_dense
from .oracles import exhaustive_coloring, fd_hessian, perp_energy
from .sharing import (
    BASIS_STRATEGIES,
    Coloring,
    SharedBasis,
    build_bases_by_group,
    color_classes,
    group_by_shape,
)

SCHEMA_VERSION = 1
BASELINES = ("adjacent-pairs", "random-coloring", "no-sharing")
TEACHERS = ("identity", "random", "planted-clusters")
OPTIMIZERS = ("gd", "adam", "lbfgs")

# fixed offsets into the seed sequence, one stream per consumer
_STREAMS = {"data": 0, "teacher": 1, "init": 2, "baseline": 3}


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[stream]]))


# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class DataSpec:
    kind: str = "regression"
    teacher: str = "planted-clusters"
    n_train: int = 256
    n_eval: int = 256
    noise: float = 0.05
    n_clusters: int = 2
    planted_rank: int = 2
    residual_scale: float = 0.05

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ParameterError(f"unknown data kind {self.kind!r}")
        if self.teacher not in TEACHERS:
            raise ParameterError(f"unknown teacher {self.teacher!r}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ParameterError("sample counts must be positive")
        if self.noise < 0 or self.residual_scale < 0:
            raise ParameterError("noise levels must be non-negative")
        if self.n_clusters < 1 or self.planted_rank < 1:
            raise ParameterError("n_clusters and planted_rank must be positive")


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: str = "lbfgs"
    steps: int = 5000
    learning_rate: float = 0.05
    grad_tol: float = 1e-9
    init: str = "teacher-perturbed"
    init_scale: float = 1.0
    init_noise: float = 0.05
    trace_every: int = 50

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0:
            raise ParameterError("steps must be non-negative")
        if not self.grad_tol > 0:
            raise ParameterError("convergence target must be > 0")
        if self.init not in ("random", "teacher-perturbed"):
            raise ParameterError(f"unknown init {self.init!r}")


@dataclass(frozen=True)
class SharingConfig:
    k: int = 2
    rank: int = 2
    strategy: str = "spectral-cluster"
    calibration_size: int | None = None
    align: AlignConfig = field(default_factory=lambda: AlignConfig(t=16))

    def __post_init__(self):
        if self.k < 1 or self.rank < 1:
            raise ParameterError("K and rank must be positive")
        if self.strategy not in BASIS_STRATEGIES:
            raise ParameterError(f"unknown basis strategy {self.strategy!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ad.ModelSpec = field(default_factory=lambda: ad.ModelSpec((8, 8, 8, 8, 8), weight_decay=2e-3))
    data: DataSpec = field(default_factory=DataSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sharing: SharingConfig = field(default_factory=SharingConfig)
    baselines: tuple[str, ...] = BASELINES
    t_sweep: tuple[int, ...] = ()
    beta_sweep: tuple[float, ...] = ()
    first_order: bool = True
    # sweeps default to the literal update so that beta actually acts
    ablation_mode: str = "paper-literal"
    seed: int = 0

    def __post_init__(self):
        if self.ablation_mode not in MODES:
            raise ParameterError(f"unknown ablation mode {self.ablation_mode!r}")
        bad = set(self.baselines) - set(BASELINES)
        if bad:
            raise ParameterError(f"unknown baselines {sorted(bad)}")
        object.__setattr__(self, "baselines", tuple(self.baselines))
        object.__setattr__(self, "t_sweep", tuple(int(t) for t in self.t_sweep))
        object.__setattr__(self, "beta_sweep", tuple(float(b) for b in self.beta_sweep))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "training": asdict(self.training),
            "sharing": {
                "k": self.sharing.k,
                "rank": self.sharing.rank,
                "strategy": self.sharing.strategy,
                "calibration_size": self.sharing.calibration_size,
                "align": self.sharing.align.to_dict(),
            },
            "baselines": list(self.baselines),
            "t_sweep": list(self.t_sweep),
            "beta_sweep": list(self.beta_sweep),
            "first_order": self.first_order,
            "ablation_mode": self.ablation_mode,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"model", "data", "training", "sharing", "baselines", "t_sweep", "beta_sweep", "first_order", "ablation_mode", "seed"}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys {sorted(extra)}")
        try:
            sharing = dict(d.get("sharing", {}))
            align = AlignConfig(**sharing.pop("align", {"t": 16}))
            return cls(
                model=ad.ModelSpec.from_dict(d["model"]) if "model" in d else ad.ModelSpec((8, 8, 8, 8, 8), weight_decay=2e-3),
                data=DataSpec(**d.get("data", {})),
                training=TrainingConfig(**d.get("training", {})),
                sharing=SharingConfig(align=align, **sharing),
                baselines=tuple(d.get("baselines", BASELINES)),
                t_sweep=tuple(d.get("t_sweep", ())),
                beta_sweep=tuple(d.get("beta_sweep", ())),
                first_order=bool(d.get("first_order", True)),
                ablation_mode=d.get("ablation_mode", "paper-literal"),
                seed=int(d.get("seed", 0)),
            )
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed), sharing=replace(self.sharing, align=replace(self.sharing.align, seed=int(seed))))

    def with_mode(self, mode: str) -> "ExperimentConfig":
        """Same config with ``mode`` for both the main run and the sweeps."""
        align = replace(self.sharing.align, mode=mode)
        return replace(self, ablation_mode=mode, sharing=replace(self.sharing, align=align))

    @property
    def ablation_align(self) -> AlignConfig:
        return replace(self.sharing.align, mode=self.ablation_mode)


# -- data ----------------------------------------------------------------------------


@dataclass
class Teacher:
    params: list[np.ndarray] | None
    planted: tuple[int, ...] | None = None


def _orthonormal(rng: np.random.Generator, n: int, r: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((n, r)))
    return q


def make_teacher(spec: ad.ModelSpec, data: DataSpec, seed: int) -> Teacher:
    """Teacher network whose targets the student learns.

    ``planted-clusters`` draws one orthonormal factor pair per cluster and
    builds every layer as ``U_c diag(s) V_c^T`` plus a small full-rank
    residual, with layers assigned to clusters in a shuffled balanced pattern.
    """
    rng = _rng(seed, "teacher")
    if data.teacher == "identity":
        if spec.layer_dims[0] != spec.layer_dims[-1]:
            raise ParameterError("identity teacher needs d_0 == d_L")
        return Teacher(None)
    if data.teacher == "random":
        return Teacher([rng.standard_normal((m, n)) / np.sqrt(n) for m, n in spec.shapes])

    shapes = spec.shapes
    if len(set(shapes)) != 1:
        raise ParameterError("planted-clusters teacher needs every layer to have the same shape")
    m, n = shapes[0]
    r = data.planted_rank
    if r > min(m, n):
        raise ParameterError(f"planted rank {r} exceeds layer shape {(m, n)}")
    c = min(data.n_clusters, spec.n_layers)
    factors = [(_orthonormal(rng, m, r), _orthonormal(rng, n, r)) for _ in range(c)]
    labels = rng.permutation(np.arange(spec.n_layers) % c)
    params = []
    for layer in range(spec.n_layers):
        u, v = factors[labels[layer]]
        s = rng.uniform(1.0, 2.0, size=r)
        resid = data.residual_scale * rng.standard_normal((m, n)) / np.sqrt(n)
        params.append(u @ np.diag(s) @ v.T + resid)
    return Teacher(params, tuple(int(x) for x in labels))


def gen_data(spec: ad.ModelSpec, data: DataSpec, seed: int, teacher: Teacher | None = None) -> tuple[ad.Batch, ad.Batch, Teacher]:
    """Deterministic (train, eval) batches labeled by a teacher network."""
    if teacher is None:
        teacher = make_teacher(spec, data, seed)
    if data.kind == "classification" and spec.loss_kind != "softmax-cross-entropy":
        raise ParameterError("classification data needs the cross-entropy loss")
    if data.kind == "regression" and spec.loss_kind != "mean-squared-error":
        raise ParameterError("regression data needs the squared-error loss")
    rng = _rng(seed, "data")
    n_total = data.n_train + data.n_eval
    x = rng.standard_normal((n_total, spec.layer_dims[0]))
    clean = x.copy() if teacher.params is None else ad.forward(spec, teacher.params, x)
    noisy = clean + data.noise * rng.standard_normal(clean.shape)
    y = np.argmax(noisy, axis=1) if data.kind == "classification" else noisy
    train = ad.Batch(x[: data.n_train], y[: data.n_train])
    eval_ = ad.Batch(x[data.n_train :], y[data.n_train :])
    return train, eval_, teacher


# -- training ------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: list[np.ndarray]
    trace: list[dict]
    final_loss: float
    final_grad_norm: float
    converged: bool
    steps: int

    def summary(self) -> dict:
        return {
            "final_loss": self.final_loss,
            "final_grad_norm": self.final_grad_norm,
            "converged": self.converged,
            "steps": self.steps,
            "trace": self.trace,
        }


def train(spec: ad.ModelSpec, params0: Sequence[np.ndarray], batch: ad.Batch, cfg: TrainingConfig) -> TrainResult:
    """Full-batch training until the gradient norm reaches ``cfg.grad_tol``."""
    w = ad.flatten(ad.check_params(spec, params0))
    trace: list[dict] = []

    def value_grad(flat):
        val, grads = ad.loss_and_gradient(spec, ad.unflatten(spec, flat), batch)
        return val, ad.flatten(grads)

    def record(step, val, g):
        if not math.isfinite(val):
            raise NumericError(f"training diverged at step {step}", step=step)
        if step % cfg.trace_every == 0:
            trace.append({"step": step, "loss": val, "grad_norm": float(np.linalg.norm(g))})

    steps = 0
    if cfg.steps > 0:
        if cfg.optimizer == "lbfgs":
            counter = {"k": 0}

            def callback(xk):
                counter["k"] += 1
                val, g = value_grad(xk)
                record(counter["k"], val, g)

            res = minimize(
                value_grad,
                w,
                jac=True,
                method="L-BFGS-B",
                callback=callback,
                options={"maxiter": cfg.steps, "gtol": cfg.grad_tol / np.sqrt(w.size), "ftol": 0.0, "maxcor": 30},
            )
            w, steps = res.x, counter["k"]
        else:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
            for step in range(1, cfg.steps + 1):
                val, g = value_grad(w)
                record(step - 1, val, g)
                if np.linalg.norm(g) <= cfg.grad_tol:
                    break
                if cfg.optimizer == "gd":
                    w = w - cfg.learning_rate * g
                else:
                    m = 0.9 * m + 0.1 * g
                    v = 0.999 * v + 0.001 * g * g
                    mh = m / (1 - 0.9**step)
                    vh = v / (1 - 0.999**step)
                    w = w - cfg.learning_rate * mh / (np.sqrt(vh) + 1e-12)
                steps = step
    val, g = value_grad(w)
    if not math.isfinite(val):
        raise NumericError(f"training diverged at step {steps}", step=steps)
    gn = float(np.linalg.norm(g))
    return TrainResult(ad.unflatten(spec, w), trace, val, gn, gn <= cfg.grad_tol, steps)


def initial_params(spec: ad.ModelSpec, cfg: TrainingConfig, teacher: Teacher, seed: int) -> list[np.ndarray]:
    rng = _rng(seed, "init")
    if cfg.init == "teacher-perturbed":
        if teacher.params is None:
            raise ConfigurationError("teacher-perturbed init needs a teacher network")
        return [w + cfg.init_noise * rng.standard_normal(w.shape) / np.sqrt(w.shape[1]) for w in teacher.params]
    return [cfg.init_scale * rng.standard_normal((m, n)) / np.sqrt(n) for m, n in spec.shapes]


# -- experiment context --------------------------------------------------------------


def array_digest(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.astype("<f8" if a.dtype.kind == "f" else "<i8").tobytes())
    return h.hexdigest()


@dataclass
class Context:
    """Everything a sharing run consumes, built once per (config, seed)."""

    config: ExperimentConfig
    spec: ad.ModelSpec
    params: list[np.ndarray]
    train_batch: ad.Batch
    eval_batch: ad.Batch
    calib_batch: ad.Batch
    teacher: Teacher
    training: TrainResult | None
    bases: list[SharedBasis]
    timing: dict = field(default_factory=dict)

    def loss_fn(self, weights):
        return ad.loss(self.spec, weights, self.eval_batch)

    def hessian_source(self):
        return ad.ModelHessianSource(self.spec, self.params, self.calib_batch)

    def hashes(self) -> dict:
        return {
            "bases": array_digest([a for b in self.bases for a in (b.U, b.V)]),
            "eval_batch": array_digest([self.eval_batch.inputs, self.eval_batch.targets]),
            "calibration_batch": array_digest([self.calib_batch.inputs, self.calib_batch.targets]),
            "params": array_digest(self.params),
        }


def prepare(config: ExperimentConfig, params: Sequence[np.ndarray] | None = None) -> Context:
    """Generate data, train (unless ``params`` are given) and build candidate bases."""
    spec = config.model
    t0 = time.perf_counter()
    train_batch, eval_batch, teacher = gen_data(spec, config.data, config.seed)
    result = None
    if params is None:
        p0 = initial_params(spec, config.training, teacher, config.seed)
        result = train(spec, p0, train_batch, config.training)
        params = result.params
    params = ad.check_params(spec, params)
    t1 = time.perf_counter()
    n_cal = config.sharing.calibration_size or train_batch.n_samples
    calib = train_batch.head(min(n_cal, train_batch.n_samples))
    bases = build_bases_by_group(params, config.sharing.k, config.sharing.rank, config.sharing.strategy)
    timing = {"train_s": t1 - t0, "bases_s": time.perf_counter() - t1}
    return Context(config, spec, list(params), train_batch, eval_batch, calib, teacher, result, bases, timing)


# -- baselines -------------------------------------------------------------------------


def baseline_coloring(name: str, shapes: Sequence[tuple[int, int]], bases: Sequence[SharedBasis], seed: int) -> Coloring:
    """Adjacent pairs ``(0,1)->B0, (2,3)->B1, ...`` or a uniform random assignment, per shape group."""
    assignment = [None] * len(shapes)
    rng = _rng(seed, "baseline")
    for shape, layers in group_by_shape(shapes).items():
        ids = [b.basis_id for b in bases if b.shape == shape]
        if not ids:
            raise ParameterError(f"no basis for shape {shape}")
        for pos, layer in enumerate(layers):
            if name == "adjacent-pairs":
                assignment[layer] = ids[(pos // 2) % len(ids)]
            elif name != "random-coloring":
                raise ParameterError(f"no coloring for baseline {name!r}")
        if name == "random-coloring":
            # uniform over assignments that use every basis, so the ratio matches
            while True:
                draw = [ids[int(i)] for i in rng.integers(len(ids), size=len(layers))]
                if len(layers) < len(ids) or len(set(draw)) == len(ids):
                    break
            for layer, b in zip(layers, draw):
                assignment[layer] = b
    return Coloring(tuple(assignment), frozenset(b.basis_id for b in bases))


def _method_entry(ctx: Context, coloring: Coloring | None, aligned, report) -> dict:
    loss_before = ctx.loss_fn(ctx.params)
    loss_after = ctx.loss_fn(aligned)
    entry: dict[str, Any] = {
        "loss_before": loss_before,
        "loss_after": loss_after,
        "delta_loss": loss_after - loss_before,
        "l2_error": float(sum(np.linalg.norm(a - w) for a, w in zip(aligned, ctx.params))),
    }
    if coloring is None:
        entry.update(compression_ratio=0.0, coloring=None, automorphism_order=1, automorphism_group=None, n_bases_used=None)
    else:
        cc = color_classes(coloring)
        entry.update(
            compression_ratio=report.compression_ratio,
            coloring=list(coloring.assignment),
            automorphism_order=cc.automorphism_order,
            automorphism_group=cc.describe(),
            n_bases_used=len(cc.classes),
            total_perp_energy=report.total_perp_energy,
            surrogate_cost_after=report.surrogate_cost_after,
        )
    if ctx.spec.loss_kind == "softmax-cross-entropy":
        entry["ppl_analog_before"] = math.exp(loss_before)
        entry["ppl_analog_after"] = math.exp(loss_after)
    return entry


def compare_methods(ctx: Context, align: AlignConfig, bundles) -> tuple[dict, Any]:
    """Geo-Sharing plus every configured baseline on identical bases and batches."""
    src = ctx.hessian_source()
    methods = {}
    coloring, aligned, geo_report = geo_share(ctx.params, ctx.bases, align, src, bundles=bundles)
    methods["geo-sharing"] = _method_entry(ctx, coloring, aligned, geo_report)
    shapes = [w.shape for w in ctx.params]
    for name in ctx.config.baselines:
        if name == "no-sharing":
            methods[name] = _method_entry(ctx, None, ctx.params, None)
            continue
        fixed = baseline_coloring(name, shapes, ctx.bases, ctx.config.seed)
        col, al, rep = geo_share(ctx.params, ctx.bases, align, src, bundles=bundles, fixed_coloring=fixed)
        methods[name] = _method_entry(ctx, col, al, rep)
    return methods, geo_report


def first_order_ratios(ctx: Context, geo_report) -> list[float | None]:
    """Per-layer ``2|g.delta| / |delta.H.delta|`` over the full model for each layer's sharing delta."""
    spec = ctx.spec
    grad = ad.flatten(ad.gradient(spec, ctx.params, ctx.calib_batch))
    op = ad.full_hessian_operator(spec, ctx.params, ctx.calib_batch)
    pool = {b.basis_id: b for b in ctx.bases}
    out = []
    for layer, rec in enumerate(geo_report.layers):
        basis = pool[rec["chosen_basis"]]
        w = ctx.params[layer]
        local = (basis.U @ (basis.U.T @ w @ basis.V) @ basis.V.T - w).ravel()
        delta = np.zeros(spec.n_params)
        delta[ad.layer_slice(spec, layer)] = local
        c = first_order_ratio(grad, delta, op)
        out.append(c if math.isfinite(c) else None)
    return out


def _median(values: Sequence[float | None]) -> float | None:
    finite = [v for v in values if v is not None]
    return float(np.median(finite)) if finite else None


# -- ablations ---------------------------------------------------------------------


def ablate(
    ctx: Context, kind: str, values: Sequence[float], bundles=None, align: AlignConfig | None = None
) -> tuple[list[dict], list[float]]:
    """One Geo-Sharing run per sweep value; returns table rows and per-row wall times."""
    if not values:
        raise ParameterError("sweep must be non-empty")
    if kind not in ("t", "beta"):
        raise ParameterError(f"unknown sweep {kind!r}")
    align = align or ctx.config.ablation_align
    src = ctx.hessian_source()
    if kind == "t":
        top = replace(align, t=max(int(v) for v in values))
        full = bundles if bundles is not None and bundles[0].t >= top.effective_t(bundles[0].dimension) else compute_bundles(ctx.params, top, src)
    else:
        full = bundles if bundles is not None else compute_bundles(ctx.params, align, src)
    loss_before = ctx.loss_fn(ctx.params)
    rows, times = [], []
    for value in values:
        t0 = time.perf_counter()
        if kind == "t":
            cfg = replace(align, t=int(value))
            run_bundles = [truncate_bundle(b, cfg.effective_t(b.dimension)) for b in full]
        else:
            cfg = replace(align, beta=float(value))
            run_bundles = full
        _, aligned, rep = geo_share(ctx.params, ctx.bases, cfg, src, bundles=run_bundles)
        loss_after = ctx.loss_fn(aligned)
        rows.append(
            {
                kind: value,
                "delta_loss": loss_after - loss_before,
                "surrogate_cost": rep.surrogate_cost_after,
                "total_perp_energy": rep.total_perp_energy,
                "coloring": rep.coloring,
            }
        )
        times.append(time.perf_counter() - t0)
    return rows, times


# -- full report -------------------------------------------------------------------


def run_experiment(config: ExperimentConfig, ctx: Context | None = None) -> tuple[dict, dict]:
    """Full comparison report and a separate timing record."""
    ctx = ctx or prepare(config)
    align = config.sharing.align
    t0 = time.perf_counter()
    bundles = compute_bundles(ctx.params, align, ctx.hessian_source())
    t1 = time.perf_counter()
    methods, geo_report = compare_methods(ctx, align, bundles)
    t2 = time.perf_counter()
    report: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "planted_coloring": list(ctx.teacher.planted) if ctx.teacher.planted is not None else None,
        "training": None if ctx.training is None else {k: v for k, v in ctx.training.summary().items() if k != "trace"},
        "hashes": ctx.hashes(),
        "methods": methods,
        "alignment": geo_report.to_dict(),
    }
    timing = dict(ctx.timing, eig_s=t1 - t0, selection_alignment_s=t2 - t1)
    if config.first_order:
        ratios = first_order_ratios(ctx, geo_report)
        finite = [c for c in ratios if c is not None]
        report["first_order_ratio"] = {
            "per_layer": ratios,
            "median": _median(ratios),
            "fraction_below_0.3": (sum(c < 0.3 for c in finite) / len(finite)) if finite else None,
        }
    ablations = {}
    for kind, values in (("t", config.t_sweep), ("beta", config.beta_sweep)):
        if values:
            rows, times = ablate(ctx, kind, values, bundles if kind == "beta" else None, config.ablation_align)
            ablations[kind] = rows
            timing[f"ablation_{kind}_s"] = times
    report["ablation"] = ablations
    return report, timing


# -- oracle suites ---------------------------------------------------------------


ORACLE_LIMITS = {"layer_params": 300, "layers": 6, "k": 3}


def run_oracles(config: ExperimentConfig, ctx: Context | None = None, n_random: int = 20) -> dict:
    """Dense and exhaustive cross-checks of every approximation in the pipeline."""
    spec = config.model
    if max(spec.layer_size(i) for i in range(spec.n_layers)) > ORACLE_LIMITS["layer_params"]:
        raise ConfigurationError("oracle suite needs <= 300 parameters per layer")
    if spec.n_layers > ORACLE_LIMITS["layers"] or config.sharing.k > ORACLE_LIMITS["k"]:
        raise ConfigurationError("oracle suite needs L <= 6 and K <= 3")
    ctx = ctx or prepare(config)
    src = ctx.hessian_source()
    rng = _rng(config.seed, "baseline")
    suites: dict[str, dict] = {}

    # 1. exact HVP against second differences of the loss
    worst = 0.0
    for layer in range(spec.n_layers):
        sl = ad.layer_slice(spec, layer)
        base = ad.flatten(ctx.params)

        def f(wl, sl=sl, base=base):
            full = base.copy()
            full[sl] = wl
            return ad.loss(spec, ad.unflatten(spec, full), ctx.calib_batch)

        h_fd = fd_hessian(f, base[sl])
        h_hvp = src(layer).to_dense(symmetrize=False)
        worst = max(worst, float(np.max(np.abs(h_fd - h_hvp)) / max(np.max(np.abs(h_hvp)), 1e-300)))
    suites["hvp_vs_finite_difference"] = {"max_error": worst, "tolerance": 1e-4, "passed": worst < 1e-4}

    # 2. Lanczos against dense diagonalization
    val_err, ang_err, skipped = 0.0, 0.0, 0
    for layer in range(spec.n_layers):
        op = src(layer)
        t = min(5, op.dimension - 1) if op.dimension > 1 else 1
        dense = sym_eig_dense(op.to_dense())
        lan = lanczos_top_eigs(op, t, seed=config.seed + layer)
        scale = max(abs(dense.values[0]), 1e-300)
        val_err = max(val_err, float(np.max(np.abs(lan.values - dense.values[:t]))) / scale)
        gap = (dense.values[t - 1] - dense.values[t]) / scale if t < op.dimension else 1.0
        if gap > 1e-3:
            ang_err = max(ang_err, float(np.max(subspace_angles(lan.vectors, dense.vectors[:, :t]))))
        else:
            skipped += 1
    suites["lanczos_vs_dense"] = {
        "max_value_error": val_err,
        "max_angle": ang_err,
        "angle_checks_skipped_for_small_gap": skipped,
        "tolerance": {"value": 1e-8, "angle": 1e-6},
        "passed": val_err < 1e-8 and ang_err < 1e-6,
    }

    # 3. greedy per-layer selection against exhaustive colorings
    align = config.sharing.align
    bundles = compute_bundles(ctx.params, align, src)
    _, _, rep = geo_share(ctx.params, ctx.bases, align, src, bundles=bundles)
    energies = [{int(b): e for b, e in rec["energies"].items()} for rec in rep.layers]
    best, best_cost = exhaustive_coloring(energies)
    proj_err = 0.0
    for rec, bundle in zip(rep.layers, bundles):
        pool = {b.basis_id: b for b in ctx.bases}
        w = ctx.params[rec["layer"]]
        for b, e in rec["energies"].items():
            basis = pool[int(b)]
            delta = (basis.U @ basis.U.T @ w @ basis.V @ basis.V.T - w).ravel()
            ref = perp_energy(delta, bundle.vectors)
            # relative to |W|^2: delta itself carries rounding at that scale
            proj_err = max(proj_err, abs(ref - e) / max(float(np.sum(w * w)), 1e-300))
    suites["greedy_vs_exhaustive"] = {
        "greedy_total": rep.total_perp_energy,
        "exhaustive_total": best_cost,
        "projector_max_rel_error": proj_err,
        "passed": rep.total_perp_energy == best_cost and proj_err < 1e-10,
    }

    # 4. decompose against explicit projector matrices
    worst = 0.0
    for bundle in bundles:
        for _ in range(n_random):
            delta = rng.standard_normal(bundle.dimension)
            split = decompose(delta, bundle)
            ref = perp_energy(delta, bundle.vectors)
            worst = max(worst, abs(split.energy_perp - ref) / max(float(delta @ delta), 1e-300))
    suites["projector_vs_decompose"] = {"max_error": worst, "tolerance": 1e-10, "passed": worst < 1e-10}

    return {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "suites": suites,
        "passed": all(s["passed"] for s in suites.values()),
    }


def dumps(obj: Any) -> str:
    """Canonical JSON text used for every report file."""
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"
