"""Differentiable models on flat parameter vectors.

Three architectures are supported, all evaluated in float64 with hand-written
backward passes:

* ``logistic``  -- one affine layer + softmax (``fc1``)
* ``mlp``       -- affine layers with ReLU between them (``fc1`` ... ``fcL``)
* ``paper_cnn`` -- conv5x5(32) -> ReLU -> maxpool2 -> conv5x5(64) -> ReLU ->
  maxpool2 -> fc(512) -> ReLU -> fc(C); convolutions use "same" padding.

Parameters live in a single :class:`ParamVector`. Each layer owns one
contiguous segment holding its weight tensor followed by its bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedlab.errors import ConfigError, ContractError
from fedlab.rng import stream

Segment = tuple[str, int, int]

KINDS = ("logistic", "mlp", "paper_cnn")

CNN_CONV1_FILTERS = 32
CNN_CONV2_FILTERS = 64
CNN_KERNEL = 5
CNN_FC_WIDTH = 512


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float vector plus an ordered ``(layer_name, start, length)`` layout."""

    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ContractError(f"ParamVector values must be 1-D, got shape {values.shape}")
        layout = tuple((str(n), int(s), int(k)) for n, s, k in self.layout)
        check_layout(layout, values.size)
        if not np.all(np.isfinite(values)):
            raise ContractError("ParamVector contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    @property
    def d(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        for n, start, length in self.layout:
            if n == name:
                return self.values[start : start + length]
        raise KeyError(name)

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def check_layout(layout, d: int) -> None:
    pos = 0
    names = set()
    for name, start, length in layout:
        if start != pos or length < 0:
            raise ContractError(f"layout segment {name!r} does not start at {pos}")
        if name in names:
            raise ContractError(f"duplicate layout segment {name!r}")
        names.add(name)
        pos += length
    if pos != d:
        raise ContractError(f"layout covers {pos} values but vector has {d}")


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise ContractError("labels must be 1-D")
        if labels.size < 1:
            raise ContractError("a batch needs at least one sample")
        if features.shape[0] != labels.size:
            raise ContractError(
                f"{features.shape[0]} feature rows but {labels.size} labels"
            )
        if labels.size and (labels.min() < 0):
            raise ContractError("labels must be non-negative")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))

    def __len__(self) -> int:
        return self.labels.size

    @staticmethod
    def concat(*batches: "Batch") -> "Batch":
        return Batch(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.labels for b in batches]),
        )


@dataclass(frozen=True)
class _Layer:
    name: str
    kind: str  # "fc" or "conv"
    w_shape: tuple[int, ...]
    b_size: int
    fan_in: int

    @property
    def size(self) -> int:
        return math.prod(self.w_shape) + self.b_size


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden_sizes: tuple[int, ...] = ()
    _layers: tuple[_Layer, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden_sizes", tuple(int(s) for s in self.hidden_sizes))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if not self.input_shape or any(s < 1 for s in self.input_shape):
            raise ConfigError(f"bad input shape {self.input_shape}")
        if self.kind == "mlp":
            if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
                raise ConfigError("mlp needs at least one positive hidden size")
        elif self.hidden_sizes:
            raise ConfigError(f"hidden_sizes only applies to mlp, not {self.kind}")
        if self.kind == "paper_cnn":
            if len(self.input_shape) != 3:
                raise ConfigError("paper_cnn needs image input (channels, H, W)")
            _, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ConfigError("paper_cnn needs H and W divisible by 4")
        object.__setattr__(self, "_layers", tuple(_build_layers(self)))

    @property
    def layout(self) -> tuple[Segment, ...]:
        out, pos = [], 0
        for layer in self._layers:
            out.append((layer.name, pos, layer.size))
            pos += layer.size
        return tuple(out)

    @property
    def num_params(self) -> int:
        return sum(layer.size for layer in self._layers)

    # Objective protocol used by fedlab.optim; works on raw float64 arrays.

    def loss_and_grad(self, values: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
        logits, cache = _forward(self, values, batch.features, keep=True)
        value, dlogits = _softmax_xent(logits, batch.labels)
        return value, _backward(self, values, cache, dlogits)

    def loss_value(self, values: np.ndarray, batch: Batch) -> float:
        logits, _ = _forward(self, values, batch.features, keep=False)
        return _softmax_xent(logits, batch.labels, need_grad=False)[0]

    def logits(self, values: np.ndarray, features: np.ndarray) -> np.ndarray:
        return _forward(self, values, np.asarray(features, dtype=np.float64), keep=False)[0]


def _build_layers(spec: ModelSpec) -> list[_Layer]:
    c = spec.num_classes
    if spec.kind in ("logistic", "mlp"):
        n_in = math.prod(spec.input_shape)
        sizes = [n_in, *spec.hidden_sizes, c]
        return [
            _Layer(f"fc{i + 1}", "fc", (sizes[i], sizes[i + 1]), sizes[i + 1], sizes[i])
            for i in range(len(sizes) - 1)
        ]
    ch, h, w = spec.input_shape
    k = CNN_KERNEL
    flat = CNN_CONV2_FILTERS * (h // 4) * (w // 4)
    return [
        _Layer("conv1", "conv", (CNN_CONV1_FILTERS, ch, k, k), CNN_CONV1_FILTERS, ch * k * k),
        _Layer(
            "conv2", "conv", (CNN_CONV2_FILTERS, CNN_CONV1_FILTERS, k, k),
            CNN_CONV2_FILTERS, CNN_CONV1_FILTERS * k * k,
        ),
        _Layer("fc1", "fc", (flat, CNN_FC_WIDTH), CNN_FC_WIDTH, flat),
        _Layer("fc2", "fc", (CNN_FC_WIDTH, c), c, CNN_FC_WIDTH),
    ]


def _unpack(spec: ModelSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if values.shape != (spec.num_params,):
        raise ContractError(
            f"parameter vector has shape {values.shape}, model expects ({spec.num_params},)"
        )
    out, pos = [], 0
    for layer in spec._layers:
        nw = math.prod(layer.w_shape)
        w = values[pos : pos + nw].reshape(layer.w_shape)
        b = values[pos + nw : pos + nw + layer.b_size]
        out.append((w, b))
        pos += layer.size
    return out


# ---------------------------------------------------------------- forward/backward


def _conv_forward(x, w, b):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, wd, k, k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, h, wd, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, w, x_shape, need_dx):
    n, c, h, wd = x_shape
    f, _, k, _ = w.shape
    dz = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dz.T @ cols).reshape(w.shape)
    db = dz.sum(axis=0)
    if not need_dx:
        return None, dw, db
    p = k // 2
    dcols = (dz @ w.reshape(f, -1)).reshape(n, h, wd, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + h, p : p + wd], dw, db


def _pool_forward(a):
    # 2x2 stride-2 max pool; np.argmax returns the first (row-major) maximum on ties.
    n, c, h, w = a.shape
    windows = a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, shape):
    n, c, h, w = shape
    d4 = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(d4, idx[..., None], dout[..., None], axis=-1)
    d4 = d4.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return d4.reshape(n, c, h, w)


def _forward(spec: ModelSpec, values: np.ndarray, x: np.ndarray, keep: bool):
    params = _unpack(spec, values)
    n = x.shape[0]
    cache: dict = {"acts": [], "masks": [], "pool": []}
    if spec.kind == "paper_cnn":
        if x.shape[1:] != spec.input_shape:
            x = _reshape_input(spec, x)
        h = x
        for w, b in params[:2]:
            z, cols = _conv_forward(h, w, b)
            mask = z > 0
            a = np.where(mask, z, 0.0)
            pooled, idx = _pool_forward(a)
            if keep:
                cache["acts"].append((cols, h.shape))
            cache["pool"].append((idx, a.shape))
            cache["masks"].append(mask)
            h = pooled
        h = h.reshape(n, -1)
        fc_params = params[2:]
    else:
        h = x.reshape(n, -1)
        if h.shape[1] != math.prod(spec.input_shape):
            raise ContractError(
                f"feature width {h.shape[1]} does not match model input {spec.input_shape}"
            )
        fc_params = params
    last = len(fc_params) - 1
    for i, (w, b) in enumerate(fc_params):
        z = h @ w + b
        if keep:
            cache["acts"].append(h)
        if i < last:
            mask = z > 0
            cache["masks"].append(mask)
            h = np.where(mask, z, 0.0)
        else:
            h = z
    return h, cache


def _reshape_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    if math.prod(x.shape[1:]) != math.prod(spec.input_shape):
        raise ContractError(
            f"feature shape {x.shape[1:]} does not match model input {spec.input_shape}"
        )
    return x.reshape(x.shape[0], *spec.input_shape)


def _backward(spec: ModelSpec, values: np.ndarray, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    params = _unpack(spec, values)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params)  # type: ignore[list-item]
    acts, masks = cache["acts"], cache["masks"]
    n_conv = 2 if spec.kind == "paper_cnn" else 0
    fc_masks = masks[n_conv:]
    dz = dlogits
    for li in range(len(params) - 1, n_conv - 1, -1):
        w, _ = params[li]
        h = acts[li]
        grads[li] = (h.T @ dz, dz.sum(axis=0))
        if li == 0:
            break
        dh = dz @ w.T
        if li - 1 >= n_conv:
            dz = dh * fc_masks[li - 1 - n_conv]
        else:
            dz = dh
    if n_conv:
        # dz is the gradient w.r.t. the flattened output of the second pool
        for ci in (1, 0):
            cols, x_shape = acts[ci]
            idx, a_shape = cache["pool"][ci]
            dpool = dz.reshape(a_shape[0], a_shape[1], a_shape[2] // 2, a_shape[3] // 2)
            da = _pool_backward(dpool, idx, a_shape) * masks[ci]
            dx, dw, db = _conv_backward(da, cols, params[ci][0], x_shape, need_dx=ci > 0)
            grads[ci] = (dw, db)
            dz = dx
    out = np.empty_like(values)
    pos = 0
    for dw, db in grads:
        out[pos : pos + dw.size] = dw.ravel()
        pos += dw.size
        out[pos : pos + db.size] = db
        pos += db.size
    return out


def _softmax_xent(logits: np.ndarray, labels: np.ndarray, need_grad: bool = True):
    n, c = logits.shape
    if labels.max() >= c:
        raise ContractError(f"label {labels.max()} out of range for {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    value = float(-logp[rows, labels].mean())
    if not need_grad:
        return value, None
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return value, d / n


def per_sample_losses(spec: ModelSpec, values: np.ndarray, batch: Batch) -> np.ndarray:
    logits = spec.logits(values, batch.features)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(len(batch)), batch.labels]


def _loss_and_signature(spec: ModelSpec, values: np.ndarray, batch: Batch):
    # ReLU masks and max-pool winners; equal signatures mean no kink was crossed.
    logits, cache = _forward(spec, values, batch.features, keep=False)
    value = _softmax_xent(logits, batch.labels, need_grad=False)[0]
    return value, cache["masks"] + [idx for idx, _ in cache["pool"]]


# ---------------------------------------------------------------- public API


def _check(spec: ModelSpec, params: ParamVector, batch: Batch | None = None) -> None:
    if params.layout != spec.layout:
        raise ContractError("parameter layout does not match model spec")
    if batch is not None and batch.labels.max() >= spec.num_classes:
        raise ContractError(
            f"label {batch.labels.max()} out of range for {spec.num_classes} classes"
        )


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    rng = stream(seed, "init")
    values = np.zeros(spec.num_params)
    pos = 0
    for layer in spec._layers:
        bound = math.sqrt(6.0 / layer.fan_in)
        nw = math.prod(layer.w_shape)
        values[pos : pos + nw] = rng.uniform(-bound, bound, size=nw)
        pos += layer.size
    return ParamVector(values, spec.layout)


def layer_slices(spec: ModelSpec) -> tuple[Segment, ...]:
    return spec.layout


def loss(spec: ModelSpec, params: ParamVector, batch: Batch) -> float:
    """Mean softmax cross-entropy over the batch."""
    _check(spec, params, batch)
    return spec.loss_value(params.values, batch)


def grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> ParamVector:
    _check(spec, params, batch)
    return ParamVector(spec.loss_and_grad(params.values, batch)[1], params.layout)


def accuracy(spec: ModelSpec, params: ParamVector, batch: Batch) -> float:
    _check(spec, params, batch)
    pred = spec.logits(params.values, batch.features).argmax(axis=1)
    return float(np.mean(pred == batch.labels))


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    checked: int
    skipped_kinks: int


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / scale


def resolution_floor(loss_value: float, epsilon: float) -> float:
    """Smallest gradient magnitude a central difference resolves to 1e-4 relative.

    Rounding the loss to one ulp moves the difference quotient by about
    ``u * |loss| / epsilon``; below 1e4 times that, relative error measures
    float64 rounding instead of the gradient.
    """
    noise = np.finfo(np.float64).eps * max(1.0, abs(loss_value)) / epsilon
    return max(1e-7, 1e4 * noise)


def grad_check_report(
    spec: ModelSpec,
    params: ParamVector,
    batch: Batch,
    epsilon: float = 1e-5,
    *,
    analytic: np.ndarray | None = None,
    full_sweep_max: int = 5000,
    sample_size: int = 256,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the analytic gradient with central differences.

    Every coordinate is checked when ``d <= full_sweep_max``; otherwise a
    seeded sample of ``sample_size`` coordinates spread over all layers.
    Coordinates whose +/-epsilon probe flips a ReLU mask or a max-pool winner
    are skipped and counted. Relative error uses ``resolution_floor`` as the
    smallest denominator.
    """
    if not (0 < epsilon <= 1e-2):
        raise ContractError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    _check(spec, params, batch)
    theta = params.values
    if analytic is None:
        analytic = spec.loss_and_grad(theta, batch)[1]
    analytic = np.asarray(analytic, dtype=np.float64)
    coords = _coordinates(spec, full_sweep_max, sample_size, seed)
    base_loss, base_sig = _loss_and_signature(spec, theta, batch)
    floor = resolution_floor(base_loss, epsilon)

    worst, worst_i, checked, skipped = 0.0, -1, 0, 0
    probe = theta.copy()
    for i in coords:
        orig = probe[i]
        probe[i] = orig + epsilon
        f_plus, sig_plus = _loss_and_signature(spec, probe, batch)
        probe[i] = orig - epsilon
        f_minus, sig_minus = _loss_and_signature(spec, probe, batch)
        probe[i] = orig
        if not (_same(base_sig, sig_plus) and _same(base_sig, sig_minus)):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * epsilon)
        err = relative_error(analytic[i], numeric, floor)
        checked += 1
        if err > worst:
            worst, worst_i = err, int(i)
    return GradCheckReport(float(worst), worst_i, checked, skipped)


def grad_check(spec: ModelSpec, params: ParamVector, batch: Batch, epsilon: float = 1e-5, **kw) -> float:
    return grad_check_report(spec, params, batch, epsilon, **kw).max_rel_error


def _same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _coordinates(spec: ModelSpec, full_sweep_max: int, sample_size: int, seed: int) -> np.ndarray:
    d = spec.num_params
    if d <= full_sweep_max:
        return np.arange(d)
    rng = stream(seed, "gradcheck")
    layout = spec.layout
    # equal share per layer; quota a small layer cannot use passes to the rest
    quota = [0] * len(layout)
    left = min(sample_size, d)
    while left:
        open_ = [i for i, (_, _, n) in enumerate(layout) if quota[i] < n]
        share = max(left // len(open_), 1)
        for i in open_:
            extra = min(share, layout[i][2] - quota[i], left)
            quota[i] += extra
            left -= extra
    picks = [start + rng.choice(n, size=q, replace=False) for (_, start, n), q in zip(layout, quota)]
    return np.sort(np.concatenate(picks))


GRADCHECK_SHAPES = {
    "logistic": ((4,), 2, ()),
    "mlp": ((8,), 5, (16, 12)),
    "paper_cnn": ((3, 32, 32), 10, ()),
}


def gradcheck_case(kind: str, seed: int, batch_size: int = 4) -> tuple[ModelSpec, ParamVector, Batch]:
    """Small random problem used by the ``gradcheck`` command.

    Biases are perturbed away from zero so their gradients are exercised at a
    generic point rather than the symmetric initial one.
    """
    if kind not in GRADCHECK_SHAPES:
        raise ConfigError(f"unknown model {kind!r}; choose from {', '.join(GRADCHECK_SHAPES)}")
    shape, classes, hidden = GRADCHECK_SHAPES[kind]
    spec = ModelSpec(kind, shape, classes, hidden)
    rng = stream(seed, "gradcheck")
    params = init_params(spec, seed)
    values = params.values.copy()
    for _, start, length in params.layout:
        values[start:start + length] += 0.01 * rng.standard_normal(length)
    batch = Batch(rng.standard_normal((batch_size, *shape)), rng.integers(0, classes, batch_size))
    return spec, params.replace(values), batch
