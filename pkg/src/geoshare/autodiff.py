"""Bias-free MLPs with exact gradients and Hessian-vector products.

Layer ``l`` maps ``h_l`` to ``a_l = h_l W_l^T``; hidden layers apply the
activation, the last layer is linear. Hessian-vector products use the
R-operator (a forward-mode pass over the reverse-mode gradient), so they are
exact up to rounding. Finite differences live only in :mod:`geoshare.oracles`.

Parameters are flattened layer by layer, each weight matrix row-major.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError, ParameterError
from .linalg import SymmetricOperator

ACTIVATIONS = ("identity", "tanh", "relu-smoothed")
LOSSES = ("mean-squared-error", "softmax-cross-entropy")

CHECKPOINT_FORMAT = "geoshare-checkpoint"


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple[int, ...]
    activation: str = "tanh"
    loss_kind: str = "mean-squared-error"
    # softplus sharpness for "relu-smoothed"
    smoothing: float = 10.0
    # ridge penalty 0.5 * weight_decay * sum |W_l|_F^2, part of the loss
    weight_decay: float = 0.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ParameterError(f"layer_dims needs >= 2 positive entries, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.loss_kind not in LOSSES:
            raise ParameterError(f"unknown loss {self.loss_kind!r}")
        if self.smoothing <= 0:
            raise ParameterError("smoothing must be positive")
        if not self.weight_decay >= 0:
            raise ParameterError("weight_decay must be non-negative")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def shapes(self) -> list[tuple[int, int]]:
        d = self.layer_dims
        return [(d[i + 1], d[i]) for i in range(self.n_layers)]

    def layer_size(self, layer: int) -> int:
        m, n = self.shapes[layer]
        return m * n

    @property
    def n_params(self) -> int:
        return sum(m * n for m, n in self.shapes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layer_dims=tuple(d["layer_dims"]),
            activation=d.get("activation", "tanh"),
            loss_kind=d.get("loss_kind", "mean-squared-error"),
            smoothing=float(d.get("smoothing", 10.0)),
            weight_decay=float(d.get("weight_decay", 0.0)),
        )


@dataclass(frozen=True)
class Batch:
    """Inputs (n x d0) with regression targets (n x dL) or class indices (n,)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ParameterError("inputs must be a non-empty 2-D array")
        y = np.asarray(self.targets)
        y = y.astype(np.int64) if y.dtype.kind in "iu" else y.astype(np.float64)
        if y.shape[0] != x.shape[0]:
            raise ParameterError("inputs and targets disagree on sample count")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("batch contains non-finite values")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])

    def head(self, n: int) -> "Batch":
        return Batch(self.inputs[:n], self.targets[:n])


def _act(spec: ModelSpec, a: np.ndarray):
    """Activation value with its first and second derivatives."""
    if spec.activation == "identity":
        return a, np.ones_like(a), np.zeros_like(a)
    if spec.activation == "tanh":
        t = np.tanh(a)
        d1 = 1.0 - t * t
        return t, d1, -2.0 * t * d1
    k = spec.smoothing
    s = 0.5 * (1.0 + np.tanh(0.5 * k * a))
    return np.logaddexp(0.0, k * a) / k, s, k * s * (1.0 - s)


def check_params(spec: ModelSpec, params: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(params) != spec.n_layers:
        raise ParameterError(f"expected {spec.n_layers} weight matrices, got {len(params)}")
    out = []
    for i, (w, shape) in enumerate(zip(params, spec.shapes)):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != shape:
            raise ParameterError(f"layer {i}: expected shape {shape}, got {w.shape}")
        out.append(w)
    return out


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.inputs.shape[1] != spec.layer_dims[0]:
        raise ParameterError(
            f"inputs have {batch.inputs.shape[1]} features, model expects {spec.layer_dims[0]}"
        )
    y = batch.targets
    if spec.loss_kind == "mean-squared-error":
        if y.ndim != 2 or y.shape[1] != spec.layer_dims[-1]:
            raise ParameterError("regression targets must be n x d_L")
    else:
        if y.ndim != 1 or y.dtype.kind != "i":
            raise ParameterError("classification targets must be integer class indices")
        if y.min() < 0 or y.max() >= spec.layer_dims[-1]:
            raise ParameterError("class index out of range")


def init_params(spec: ModelSpec, seed: int, scale: float = 1.0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [scale * rng.standard_normal((m, n)) / np.sqrt(n) for m, n in spec.shapes]


def flatten(params: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(w, dtype=np.float64).ravel() for w in params])


def unflatten(spec: ModelSpec, flat: np.ndarray) -> list[np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (spec.n_params,):
        raise ParameterError(f"expected {spec.n_params} parameters, got {flat.shape}")
    out, pos = [], 0
    for m, n in spec.shapes:
        out.append(flat[pos : pos + m * n].reshape(m, n).copy())
        pos += m * n
    return out


def layer_slice(spec: ModelSpec, layer: int) -> slice:
    if not 0 <= layer < spec.n_layers:
        raise ParameterError(f"layer index {layer} outside [0, {spec.n_layers})")
    start = sum(spec.layer_size(i) for i in range(layer))
    return slice(start, start + spec.layer_size(layer))


def _forward(spec, params, x):
    hs, pres = [x], []
    last = spec.n_layers - 1
    for i, w in enumerate(params):
        with np.errstate(over="ignore", invalid="ignore"):
            a = hs[-1] @ w.T
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activations in layer {i}", layer=i)
        pres.append(a)
        if i < last:
            hs.append(_act(spec, a)[0])
    return pres, hs


def _loss_from_output(spec, out, y) -> float:
    n = out.shape[0]
    if spec.loss_kind == "mean-squared-error":
        r = out - y
        return 0.5 * float(np.sum(r * r)) / n
    lse = np.logaddexp.reduce(out, axis=1)
    return float(np.sum(lse - out[np.arange(n), y])) / n


def _output_grad(spec, out, y):
    n = out.shape[0]
    if spec.loss_kind == "mean-squared-error":
        return (out - y) / n
    p = np.exp(out - np.logaddexp.reduce(out, axis=1, keepdims=True))
    p[np.arange(n), y] -= 1.0
    return p / n


def _output_rgrad(spec, out, r_out):
    n = out.shape[0]
    if spec.loss_kind == "mean-squared-error":
        return r_out / n
    p = np.exp(out - np.logaddexp.reduce(out, axis=1, keepdims=True))
    return p * (r_out - np.sum(p * r_out, axis=1, keepdims=True)) / n


def forward(spec: ModelSpec, params: Sequence[np.ndarray], inputs: np.ndarray) -> np.ndarray:
    """Network outputs (pre-softmax logits for classification)."""
    params = check_params(spec, params)
    pres, _ = _forward(spec, params, np.asarray(inputs, dtype=np.float64))
    return pres[-1]


def _penalty(spec, params) -> float:
    if spec.weight_decay == 0:
        return 0.0
    return 0.5 * spec.weight_decay * sum(float(np.sum(w * w)) for w in params)


def loss(spec: ModelSpec, params: Sequence[np.ndarray], batch: Batch) -> float:
    params = check_params(spec, params)
    _check_batch(spec, batch)
    pres, _ = _forward(spec, params, batch.inputs)
    value = _loss_from_output(spec, pres[-1], batch.targets) + _penalty(spec, params)
    if not np.isfinite(value):
        raise NumericError("non-finite loss", layer=spec.n_layers - 1)
    return value


def loss_and_gradient(spec, params, batch) -> tuple[float, list[np.ndarray]]:
    params = check_params(spec, params)
    _check_batch(spec, batch)
    pres, hs = _forward(spec, params, batch.inputs)
    value = _loss_from_output(spec, pres[-1], batch.targets) + _penalty(spec, params)
    g = _output_grad(spec, pres[-1], batch.targets)
    grads: list[np.ndarray] = [None] * spec.n_layers  # type: ignore[list-item]
    for i in range(spec.n_layers - 1, -1, -1):
        grads[i] = g.T @ hs[i] + spec.weight_decay * params[i]
        if i > 0:
            g = (g @ params[i]) * _act(spec, pres[i - 1])[1]
    return value, grads


def gradient(spec: ModelSpec, params: Sequence[np.ndarray], batch: Batch) -> list[np.ndarray]:
    """Exact reverse-mode gradient, one array per layer."""
    return loss_and_gradient(spec, params, batch)[1]


def _rop_gradient(spec, params, batch, tangents):
    """Directional derivative of the gradient along ``tangents`` (Pearlmutter's R-op)."""
    pres, hs = _forward(spec, params, batch.inputs)
    last = spec.n_layers - 1
    derivs = [_act(spec, a) for a in pres[:-1]]

    r_h = [np.zeros_like(batch.inputs)]
    r_pres = []
    for i, (w, v) in enumerate(zip(params, tangents)):
        r_a = r_h[-1] @ w.T + hs[i] @ v.T
        r_pres.append(r_a)
        if i < last:
            r_h.append(derivs[i][1] * r_a)

    g = _output_grad(spec, pres[-1], batch.targets)
    r_g = _output_rgrad(spec, pres[-1], r_pres[-1])
    out: list[np.ndarray] = [None] * spec.n_layers  # type: ignore[list-item]
    for i in range(last, -1, -1):
        out[i] = r_g.T @ hs[i] + g.T @ r_h[i] + spec.weight_decay * tangents[i]
        if i > 0:
            dh = g @ params[i]
            r_dh = r_g @ params[i] + g @ tangents[i]
            _, d1, d2 = derivs[i - 1]
            r_g = r_dh * d1 + dh * d2 * r_pres[i - 1]
            g = dh * d1
    return out


def hvp(
    spec: ModelSpec,
    params: Sequence[np.ndarray],
    batch: Batch,
    v: np.ndarray,
    layer: int | None = None,
) -> np.ndarray:
    """Exact Hessian-vector product of the loss.

    With ``layer=None`` the scope is all weights; otherwise only ``vec(W_layer)``
    varies and every other layer is held fixed.
    """
    params = check_params(spec, params)
    _check_batch(spec, batch)
    v = np.asarray(v, dtype=np.float64)
    if layer is None:
        tangents = unflatten(spec, v)
    else:
        sl = layer_slice(spec, layer)
        if v.shape != (sl.stop - sl.start,):
            raise ParameterError(f"layer {layer} scope has {sl.stop - sl.start} params, got {v.shape}")
        tangents = [np.zeros_like(w) for w in params]
        tangents[layer] = v.reshape(params[layer].shape)
    out = _rop_gradient(spec, params, batch, tangents)
    return out[layer].ravel() if layer is not None else flatten(out)


def layer_hessian_operator(spec, params, batch, layer: int) -> SymmetricOperator:
    """Hessian of the loss with respect to ``vec(W_layer)`` as a matrix-free operator."""
    params = check_params(spec, params)
    _check_batch(spec, batch)
    layer_slice(spec, layer)
    frozen = [w.copy() for w in params]
    return SymmetricOperator(spec.layer_size(layer), lambda v: hvp(spec, frozen, batch, v, layer))


def full_hessian_operator(spec, params, batch) -> SymmetricOperator:
    params = check_params(spec, params)
    _check_batch(spec, batch)
    frozen = [w.copy() for w in params]
    return SymmetricOperator(spec.n_params, lambda v: hvp(spec, frozen, batch, v))


class ModelHessianSource:
    """Per-layer Hessian operators of one model on one calibration batch."""

    def __init__(self, spec: ModelSpec, params: Sequence[np.ndarray], batch: Batch):
        self.spec = spec
        self.params = [w.copy() for w in check_params(spec, params)]
        self.batch = batch

    def __call__(self, layer: int) -> SymmetricOperator:
        return layer_hessian_operator(self.spec, self.params, self.batch, layer)


def save_checkpoint(directory, spec: ModelSpec, params: Sequence[np.ndarray], seed: int) -> Path:
    """Write ``manifest.json`` plus one raw little-endian f64 file per layer."""
    params = check_params(spec, params)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, w in enumerate(params):
        name = f"layer_{i:03d}.bin"
        (directory / name).write_bytes(np.ascontiguousarray(w, dtype="<f8").tobytes())
        layers.append({"index": i, "shape": list(w.shape), "file": name})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "spec": spec.to_dict(),
        "seed": int(seed),
        "dtype": "f64",
        "endianness": "little",
        "layers": layers,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[ModelSpec, list[np.ndarray], int]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{directory} is not a geoshare checkpoint")
    if manifest.get("dtype") != "f64" or manifest.get("endianness") != "little":
        raise DataError("only little-endian f64 checkpoints are supported")
    spec = ModelSpec.from_dict(manifest["spec"])
    params = []
    for entry, shape in zip(manifest["layers"], spec.shapes):
        if tuple(entry["shape"]) != shape:
            raise DataError(f"layer {entry['index']} shape disagrees with spec")
        raw = (directory / entry["file"]).read_bytes()
        if len(raw) != 8 * shape[0] * shape[1]:
            raise DataError(f"{entry['file']} has {len(raw)} bytes, expected {8 * shape[0] * shape[1]}")
        params.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
    return spec, params, int(manifest["seed"])
