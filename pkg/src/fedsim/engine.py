"""Minimal deterministic neural-network engine: forward, backprop, Adam.

Supports Conv2d / MaxPool2d / Dense / ReLU / Dropout / Flatten, which covers
the three CNN architectures used by the simulator. State lives in plain numpy
arrays; parameters are float32 by default but all ops follow the input dtype
so tests can run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Layer shapes do not compose, or an input does not match the model."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int
    stride: int


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    p: float


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Conv2d | MaxPool2d | Dense | ReLU | Dropout | Flatten


class Architecture:
    """Ordered layer specs plus the input shape they are applied to.

    Validates at construction that consecutive shapes compose. Parameterized
    layers get stable names (conv2d_1, conv2d_2, ..., fc_1, fc_2, ...); the
    penultimate dense layer (the last one before the output dense) is the
    layer whose weights act as the model's compared representation.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec]):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = tuple(layers)
        if not self.layers:
            raise ShapeError("architecture has no layers")
        if any(d <= 0 for d in self.input_shape):
            raise ShapeError(f"non-positive input dimension in {self.input_shape}")

        names: list[str] = []
        shapes: list[tuple[int, ...]] = []
        n_conv = n_fc = 0
        shape = self.input_shape
        for spec in self.layers:
            if isinstance(spec, Conv2d):
                if len(shape) != 3:
                    raise ShapeError(f"Conv2d needs a (C,H,W) input, got {shape}")
                c, h, w = shape
                if c != spec.in_ch:
                    raise ShapeError(f"Conv2d expects {spec.in_ch} channels, got {c}")
                oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
                ow = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
                if oh <= 0 or ow <= 0:
                    raise ShapeError(f"Conv2d kernel {spec.kernel} too large for {shape}")
                n_conv += 1
                names.append(f"conv2d_{n_conv}")
                shape = (spec.out_ch, oh, ow)
            elif isinstance(spec, MaxPool2d):
                if len(shape) != 3:
                    raise ShapeError(f"MaxPool2d needs a (C,H,W) input, got {shape}")
                c, h, w = shape
                oh = (h - spec.kernel) // spec.stride + 1
                ow = (w - spec.kernel) // spec.stride + 1
                if oh <= 0 or ow <= 0:
                    raise ShapeError(f"MaxPool2d kernel {spec.kernel} too large for {shape}")
                names.append("")
                shape = (c, oh, ow)
            elif isinstance(spec, Dense):
                if len(shape) != 1:
                    raise ShapeError(f"Dense needs a flat input, got {shape} (missing Flatten?)")
                if shape[0] != spec.n_in:
                    raise ShapeError(f"Dense expects {spec.n_in} inputs, got {shape[0]}")
                n_fc += 1
                names.append(f"fc_{n_fc}")
                shape = (spec.n_out,)
            elif isinstance(spec, Flatten):
                names.append("")
                shape = (int(np.prod(shape)),)
            elif isinstance(spec, (ReLU, Dropout)):
                if isinstance(spec, Dropout) and not 0.0 <= spec.p < 1.0:
                    raise ShapeError(f"Dropout p must be in [0,1), got {spec.p}")
                names.append("")
            else:
                raise ShapeError(f"unknown layer spec {spec!r}")
            shapes.append(shape)

        if len(shape) != 1:
            raise ShapeError(f"output must be flat logits, got {shape}")
        self.layer_names = tuple(names)
        self.output_shapes = tuple(shapes)
        self.n_classes = shape[0]

        dense_names = [n for n, s in zip(names, self.layers) if isinstance(s, Dense)]
        self.param_layer_names = tuple(n for n in names if n)
        self.penultimate_name: Optional[str] = (
            dense_names[-2] if len(dense_names) >= 2 else None
        )

    def __repr__(self) -> str:
        return f"Architecture(input={self.input_shape}, layers={len(self.layers)})"


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerParams:
    name: str
    weight: np.ndarray
    bias: Optional[np.ndarray]


@dataclass
class ModelParams:
    """Ordered named weight/bias tensors for one network."""

    layers: list[LayerParams]

    def copy(self) -> "ModelParams":
        return ModelParams(
            [
                LayerParams(l.name, l.weight.copy(), None if l.bias is None else l.bias.copy())
                for l in self.layers
            ]
        )

    def get(self, name: str) -> LayerParams:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + (0 if l.bias is None else l.bias.size) for l in self.layers)

    def flat(self) -> np.ndarray:
        """All parameters as one 1-D vector (layer order, weight then bias)."""
        parts = []
        for l in self.layers:
            parts.append(l.weight.ravel())
            if l.bias is not None:
                parts.append(l.bias.ravel())
        return np.concatenate(parts)

    @staticmethod
    def from_flat(template: "ModelParams", vec: np.ndarray) -> "ModelParams":
        """Rebuild params shaped like ``template`` from a flat vector."""
        if vec.size != template.n_params:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {template.n_params}")
        out = []
        pos = 0
        for l in template.layers:
            w = vec[pos : pos + l.weight.size].reshape(l.weight.shape).astype(l.weight.dtype)
            pos += l.weight.size
            b = None
            if l.bias is not None:
                b = vec[pos : pos + l.bias.size].reshape(l.bias.shape).astype(l.bias.dtype)
                pos += l.bias.size
            out.append(LayerParams(l.name, w, b))
        return ModelParams(out)


def init_model(arch: Architecture, seed: int) -> ModelParams:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for name, spec in zip(arch.layer_names, arch.layers):
        if isinstance(spec, Conv2d):
            fan_in = spec.in_ch * spec.kernel * spec.kernel
            bound = np.sqrt(1.0 / fan_in)
            w = rng.uniform(-bound, bound, (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
            layers.append(
                LayerParams(name, w.astype(np.float32), np.zeros(spec.out_ch, np.float32))
            )
        elif isinstance(spec, Dense):
            bound = np.sqrt(1.0 / spec.n_in)
            w = rng.uniform(-bound, bound, (spec.n_out, spec.n_in))
            layers.append(
                LayerParams(name, w.astype(np.float32), np.zeros(spec.n_out, np.float32))
            )
    return ModelParams(layers)


# ---------------------------------------------------------------------------
# forward / backward primitives


# Conv kernels: torch-cpu when importable (several times faster on this
# workload), otherwise a from-scratch im2col path. Both produce plain numpy
# arrays and follow the input dtype; everything around them (Adam, dropout,
# losses, init) is hand-rolled either way.

try:
    import torch as _torch
except ImportError:  # pragma: no cover - covered via the forced-fallback tests
    _torch = None


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int):
    """Extract conv patches as a (N*oh*ow, C*k*k) matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, oh, ow, kernel, kernel),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kernel * kernel)
    return cols, (n, c, h, w), oh, ow


def _col2im(dcols, padded_shape, kernel: int, stride: int, pad: int, oh: int, ow: int):
    """Scatter-add patch gradients back onto the (unpadded) input."""
    n, c, h, w = padded_shape
    dx = np.zeros(padded_shape, dcols.dtype)
    d6 = dcols.reshape(n, oh, ow, c, kernel, kernel)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += d6[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


def _conv_forward(x, spec: Conv2d, w, b):
    if _torch is not None:
        out = _torch.nn.functional.conv2d(
            _torch.from_numpy(np.ascontiguousarray(x)),
            _torch.from_numpy(w),
            _torch.from_numpy(b),
            stride=spec.stride,
            padding=spec.pad,
        ).numpy()
        return out, (x, None)
    cols, padded_shape, oh, ow = _im2col(x, spec.kernel, spec.stride, spec.pad)
    out = cols @ w.reshape(spec.out_ch, -1).T
    out += b
    n = x.shape[0]
    out = out.reshape(n, oh, ow, spec.out_ch).transpose(0, 3, 1, 2)
    return out, (None, (cols, padded_shape, oh, ow))


def _conv_backward(dout, spec: Conv2d, w, cache, need_dx: bool):
    x, im2col_cache = cache
    if _torch is not None:
        dout_t = _torch.from_numpy(np.ascontiguousarray(dout))
        x_t = _torch.from_numpy(np.ascontiguousarray(x))
        w_t = _torch.from_numpy(w)
        dw = _torch.nn.grad.conv2d_weight(
            x_t, w_t.shape, dout_t, stride=spec.stride, padding=spec.pad
        ).numpy()
        db = dout.sum(axis=(0, 2, 3))
        dx = None
        if need_dx:
            dx = _torch.nn.grad.conv2d_input(
                x_t.shape, w_t, dout_t, stride=spec.stride, padding=spec.pad
            ).numpy()
        return dx, dw, db
    cols, padded_shape, oh, ow = im2col_cache
    n = dout.shape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(n * oh * ow, spec.out_ch)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dx = None
    if need_dx:
        dcols = dmat @ w.reshape(spec.out_ch, -1)
        dx = _col2im(dcols, padded_shape, spec.kernel, spec.stride, spec.pad, oh, ow)
    return dx, dw, db


def _pool_forward(x, spec: MaxPool2d):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    k, s = spec.kernel, spec.stride
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, oh, ow, k, k),
        strides=(s0, s1, s2 * s, s3 * s, s2, s3),
        writeable=False,
    )
    flat = windows.reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _pool_backward(dout, spec: MaxPool2d, cache):
    x_shape, idx = cache
    n, c, h, w = x_shape
    k, s = spec.kernel, spec.stride
    oh, ow = idx.shape[2], idx.shape[3]
    dx = np.zeros(x_shape, dout.dtype)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    rows = np.arange(oh)[None, None, :, None] * s + idx // k
    cols = np.arange(ow)[None, None, None, :] * s + idx % k
    np.add.at(dx, (ni, ci, rows, cols), dout)
    return dx


def _forward(
    arch: Architecture,
    params: ModelParams,
    batch: np.ndarray,
    train_mode: bool,
    rng: Optional[np.random.Generator],
    want_caches: bool,
):
    if tuple(batch.shape[1:]) != arch.input_shape:
        raise ShapeError(
            f"batch shape {tuple(batch.shape[1:])} does not match input {arch.input_shape}"
        )
    x = batch
    caches = []
    p_iter = iter(params.layers)
    for spec in arch.layers:
        cache = None
        if isinstance(spec, Conv2d):
            lp = next(p_iter)
            x, cache = _conv_forward(x, spec, lp.weight, lp.bias)
        elif isinstance(spec, MaxPool2d):
            x, cache = _pool_forward(x, spec)
        elif isinstance(spec, Dense):
            lp = next(p_iter)
            cache = x
            x = x @ lp.weight.T + lp.bias
        elif isinstance(spec, ReLU):
            cache = x > 0
            x = np.maximum(x, 0)
        elif isinstance(spec, Dropout):
            if train_mode and spec.p > 0.0:
                mask = (rng.random(x.shape) >= spec.p).astype(x.dtype) / (1.0 - spec.p)
                cache = mask
                x = x * mask
        elif isinstance(spec, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        if want_caches:
            caches.append(cache)
    return x, caches


def _backward(arch: Architecture, params: ModelParams, caches, dlogits):
    """Walk layers in reverse; returns per-parameter-layer (dW, db)."""
    param_specs = [i for i, s in enumerate(arch.layers) if isinstance(s, (Conv2d, Dense))]
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    first_param = param_specs[0] if param_specs else -1
    dx = dlogits
    p_idx = len(param_specs)
    for i in range(len(arch.layers) - 1, -1, -1):
        spec = arch.layers[i]
        cache = caches[i]
        if isinstance(spec, Conv2d):
            p_idx -= 1
            lp = params.layers[p_idx]
            dx, dw, db = _conv_backward(dx, spec, lp.weight, cache, need_dx=i > first_param)
            grads[p_idx] = (dw, db)
            if dx is None:
                break
        elif isinstance(spec, Dense):
            p_idx -= 1
            lp = params.layers[p_idx]
            dw = dx.T @ cache
            db = dx.sum(axis=0)
            dx = dx @ lp.weight if i > first_param else None
            grads[p_idx] = (dw, db)
            if dx is None:
                break
        elif isinstance(spec, MaxPool2d):
            dx = _pool_backward(dx, spec, cache)
        elif isinstance(spec, ReLU):
            dx = dx * cache
        elif isinstance(spec, Dropout):
            if cache is not None:
                dx = dx * cache
        elif isinstance(spec, Flatten):
            dx = dx.reshape(cache)
    return [grads[i] for i in range(len(param_specs))]


def forward(
    arch: Architecture,
    params: ModelParams,
    batch: np.ndarray,
    train_mode: bool = False,
    dropout_seed: int = 0,
) -> np.ndarray:
    """Run the network, returning logits [batch, n_classes].

    Dropout is active only in train_mode and its mask is a deterministic
    function of dropout_seed.
    """
    rng = np.random.default_rng(dropout_seed) if train_mode else None
    logits, _ = _forward(arch, params, batch, train_mode, rng, want_caches=False)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(arch: Architecture, params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Softmax class probabilities in inference mode."""
    return softmax(forward(arch, params, batch, train_mode=False))


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy (accumulated in float64) and its logits gradient."""
    n = logits.shape[0]
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("label out of range")
    p = softmax(logits)
    eps = np.finfo(np.float64).tiny
    loss = float(-np.log(p[np.arange(n), labels].astype(np.float64) + eps).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the step counter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.step,
            [a.copy() for a in self.m],
            [a.copy() for a in self.v],
        )


def init_adam(params: ModelParams, lr: float = 0.001) -> AdamState:
    arrays = []
    for l in params.layers:
        arrays.append(l.weight)
        if l.bias is not None:
            arrays.append(l.bias)
    return AdamState(
        lr=lr,
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
    )


def adam_step(params: ModelParams, grads: list[np.ndarray], state: AdamState):
    """One Adam update with bias-corrected moments; returns new (params, state)."""
    new_params = params.copy()
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    arrays = []
    for l in new_params.layers:
        arrays.append(l.weight)
        if l.bias is not None:
            arrays.append(l.bias)
    if len(grads) != len(arrays):
        raise ShapeError(f"got {len(grads)} gradients for {len(arrays)} parameter tensors")
    new_m, new_v = [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        g = g.astype(a.dtype, copy=False)
        m = state.beta1 * m
        m += (1.0 - state.beta1) * g
        v = state.beta2 * v
        v += (1.0 - state.beta2) * (g * g)
        step = np.sqrt(v / c2)
        step += state.eps
        np.divide(m, step, out=step)
        step *= state.lr / c1
        a -= step.astype(a.dtype, copy=False)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(
        state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v
    )


def loss_and_grads(
    arch: Architecture,
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    dropout_seed: int = 0,
):
    """Cross-entropy loss and per-tensor gradients for one train-mode batch."""
    rng = np.random.default_rng(dropout_seed)
    logits, caches = _forward(arch, params, batch, train_mode=True, rng=rng, want_caches=True)
    loss, dlogits = cross_entropy(logits, labels)
    layer_grads = _backward(arch, params, caches, dlogits)
    flat_grads: list[np.ndarray] = []
    for dw, db in layer_grads:
        flat_grads.append(dw)
        flat_grads.append(db)
    return loss, flat_grads


def train_step(
    arch: Architecture,
    params: ModelParams,
    adam: AdamState,
    batch: np.ndarray,
    labels: np.ndarray,
    dropout_seed: int = 0,
):
    """One forward/backward/Adam step; returns (params, adam, loss)."""
    loss, flat_grads = loss_and_grads(arch, params, batch, labels, dropout_seed)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss!r} at adam step {adam.step}")
    new_params, new_adam = adam_step(params, flat_grads, adam)
    return new_params, new_adam, loss


def fit(
    arch: Architecture,
    params: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    inject: Optional[tuple[np.ndarray, int]] = None,
):
    """Local training loop: shuffled minibatches, fresh Adam state.

    ``inject`` optionally appends one extra (image, label) sample to every
    batch, which is how a backdoor task rides along with honest training.
    Returns (params, per-step losses).
    """
    params = params.copy()
    adam = init_adam(params, lr=lr)
    n = images.shape[0]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            bx, by = images[sel], labels[sel]
            if inject is not None:
                bx = np.concatenate([bx, inject[0][None]])
                by = np.concatenate([by, np.asarray([inject[1]], by.dtype)])
            seed = int(rng.integers(0, 2**31 - 1))
            params, adam, loss = train_step(arch, params, adam, bx, by, dropout_seed=seed)
            losses.append(loss)
    return params, losses


# ---------------------------------------------------------------------------
# reference architectures


def fmnist_cnn() -> Architecture:
    """4-layer CNN for 28x28 grayscale, 10 classes."""
    return Architecture(
        (1, 28, 28),
        [
            Conv2d(1, 64, 5),
            ReLU(),
            Conv2d(64, 64, 5),
            ReLU(),
            Dropout(0.25),
            Flatten(),
            Dense(25600, 128),
            Dropout(0.5),
            Dense(128, 10),
        ],
    )


def cifar10_cnn() -> Architecture:
    """5-layer CNN for 32x32 RGB, 10 classes."""
    return Architecture(
        (3, 32, 32),
        [
            Conv2d(3, 64, 3),
            ReLU(),
            MaxPool2d(2, 2),
            Conv2d(64, 64, 3),
            ReLU(),
            MaxPool2d(2, 2),
            Conv2d(64, 64, 3),
            ReLU(),
            MaxPool2d(2, 2),
            Flatten(),
            Dropout(0.5),
            Dense(256, 128),
            Dense(128, 10),
        ],
    )


def lenet_cifar100() -> Architecture:
    """LeNet-style net for 32x32 RGB, 100 classes."""
    return Architecture(
        (3, 32, 32),
        [
            Conv2d(3, 6, 5),
            ReLU(),
            MaxPool2d(2, 2),
            Conv2d(6, 16, 5, pad=2),
            ReLU(),
            MaxPool2d(2, 2),
            Flatten(),
            Dense(784, 120),
            ReLU(),
            Dense(120, 84),
            ReLU(),
            Dense(84, 100),
        ],
    )


def mlp(input_dim: int, hidden: Sequence[int], n_classes: int) -> Architecture:
    """Small dense net for flat (synthetic) inputs, shaped [n,1,dim,1]."""
    layers: list[LayerSpec] = [Flatten()]
    prev = input_dim
    for width in hidden:
        layers.append(Dense(prev, width))
        layers.append(ReLU())
        prev = width
    layers.append(Dense(prev, n_classes))
    return Architecture((1, input_dim, 1), layers)


ARCHITECTURES: dict[str, Callable[[], Architecture]] = {
    "fmnist_cnn": fmnist_cnn,
    "cifar10_cnn": cifar10_cnn,
    "lenet_cifar100": lenet_cifar100,
}
