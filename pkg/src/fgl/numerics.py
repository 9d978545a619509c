"""Small dense neural-network stack with exact analytic gradients.

Tensors are plain float64 numpy arrays with the batch on axis 0. Images are
laid out NHWC. Parameters live in one flat vector (:class:`ParamVector`) so
that federated aggregation and optimizer steps are simple vector arithmetic;
each layer reads its weights through views into that vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .seeding import derive_rng


class ShapeError(ValueError):
    """Raised when a layer receives an input of the wrong shape."""

    def __init__(self, index: int, layer, expected, got):
        self.index = index
        self.layer = layer
        super().__init__(
            f"layer {index} ({layer!r}): expected input shape {tuple(expected)}, got {tuple(got)}"
        )


@dataclass(frozen=True)
class Affine:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class SoftmaxHead:
    """Marks the logits as class scores; evaluation applies softmax-CE here."""

    classes: int


Layer = Union[Affine, Conv2D, ReLU, Flatten, SoftmaxHead]


def _param_count(layer: Layer) -> int:
    if isinstance(layer, Affine):
        return layer.in_features * layer.out_features + layer.out_features
    if isinstance(layer, Conv2D):
        return layer.in_channels * layer.kernel**2 * layer.out_channels + layer.out_channels
    return 0


def _out_shape(index: int, layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Affine):
        if shape != (layer.in_features,):
            raise ShapeError(index, layer, (layer.in_features,), shape)
        return (layer.out_features,)
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[2] != layer.in_channels or min(shape[:2]) < layer.kernel:
            raise ShapeError(index, layer, ("H>=k", "W>=k", layer.in_channels), shape)
        h = (shape[0] - layer.kernel) // layer.stride + 1
        w = (shape[1] - layer.kernel) // layer.stride + 1
        return (h, w, layer.out_channels)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, SoftmaxHead):
        if shape != (layer.classes,):
            raise ShapeError(index, layer, (layer.classes,), shape)
        return shape
    raise TypeError(f"unknown layer type {layer!r}")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the per-sample input shape.

    Construction validates that adjacent shapes compose and that the network
    ends in a :class:`SoftmaxHead`.
    """

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    layout: tuple[tuple[int, int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or not isinstance(self.layers[-1], SoftmaxHead):
            raise ValueError("network must end with a SoftmaxHead layer")
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _out_shape(i, layer, shape)
            shapes.append(shape)
        layout = []
        offset = 0
        for layer in self.layers:
            n = _param_count(layer)
            layout.append((offset, n))
            offset += n
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "layout", tuple(layout))

    @property
    def num_classes(self) -> int:
        return self.layers[-1].classes

    @property
    def num_params(self) -> int:
        off, n = self.layout[-1]
        return off + n


def mlp(input_dim: int, hidden: Sequence[int], classes: int) -> NetworkSpec:
    layers: list[Layer] = []
    width = input_dim
    for h in hidden:
        layers += [Affine(width, h), ReLU()]
        width = h
    layers += [Affine(width, classes), SoftmaxHead(classes)]
    return NetworkSpec((input_dim,), tuple(layers))


def small_cnn(height: int, width: int, channels: int, classes: int,
              filters: tuple[int, int] = (8, 16), kernel: int = 5, stride: int = 2) -> NetworkSpec:
    """Two conv layers followed by one fully connected layer."""
    c1, c2 = filters
    layers: list[Layer] = [
        Conv2D(channels, c1, kernel, stride), ReLU(),
        Conv2D(c1, c2, kernel, stride), ReLU(),
        Flatten(),
    ]
    h, w = height, width
    for _ in range(2):
        h = (h - kernel) // stride + 1
        w = (w - kernel) // stride + 1
    layers += [Affine(h * w * c2, classes), SoftmaxHead(classes)]
    return NetworkSpec((height, width, channels), tuple(layers))


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple[tuple[int, int], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("parameter values must be a flat vector")
        total = sum(n for _, n in self.layout)
        if total != self.values.size:
            raise ValueError(f"layout covers {total} values but vector has {self.values.size}")

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def layer(self, i: int) -> np.ndarray:
        off, n = self.layout[i]
        return self.values[off:off + n]


def init_params(net: NetworkSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = derive_rng(seed, "init")
    values = np.zeros(net.num_params)
    for layer, (off, _) in zip(net.layers, net.layout):
        if isinstance(layer, Affine):
            fan_in, fan_out = layer.in_features, layer.out_features
            nw = fan_in * fan_out
        elif isinstance(layer, Conv2D):
            k2 = layer.kernel**2
            fan_in, fan_out = layer.in_channels * k2, layer.out_channels * k2
            nw = layer.in_channels * k2 * layer.out_channels
        else:
            continue
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        values[off:off + nw] = rng.uniform(-bound, bound, nw)
    return ParamVector(values, net.layout)


def zeros_params(net: NetworkSpec) -> ParamVector:
    return ParamVector(np.zeros(net.num_params), net.layout)


def _weights(layer: Layer, flat: np.ndarray):
    if isinstance(layer, Affine):
        nw = layer.in_features * layer.out_features
        return flat[:nw].reshape(layer.in_features, layer.out_features), flat[nw:]
    nw = layer.in_channels * layer.kernel**2 * layer.out_channels
    return flat[:nw].reshape(-1, layer.out_channels), flat[nw:]


def _check(net: NetworkSpec, params: ParamVector, batch: np.ndarray) -> np.ndarray:
    if tuple(params.layout) != net.layout:
        raise ValueError("parameter layout does not match network")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != net.input_shape:
        raise ShapeError(0, net.layers[0], net.input_shape, batch.shape[1:])
    if not np.isfinite(batch).all():
        raise ValueError("batch contains non-finite values")
    return batch


def _forward(net: NetworkSpec, params: ParamVector, x: np.ndarray):
    caches = []
    a = x
    for layer, (off, n) in zip(net.layers, net.layout):
        if isinstance(layer, Affine):
            W, b = _weights(layer, params.values[off:off + n])
            caches.append(a)
            a = a @ W + b
        elif isinstance(layer, Conv2D):
            W, b = _weights(layer, params.values[off:off + n])
            k, s = layer.kernel, layer.stride
            win = sliding_window_view(a, (k, k), axis=(1, 2))[:, ::s, ::s]
            cols = win.reshape(*win.shape[:3], layer.in_channels * k * k)
            caches.append((a.shape, cols))
            a = cols @ W + b
        elif isinstance(layer, ReLU):
            mask = a > 0
            caches.append(mask)
            a = a * mask
        elif isinstance(layer, Flatten):
            caches.append(a.shape)
            a = a.reshape(a.shape[0], int(np.prod(a.shape[1:])))
        else:
            caches.append(None)
    return a, caches


def _backward(net: NetworkSpec, params: ParamVector, caches, dout: np.ndarray):
    grad = np.zeros_like(params.values)
    for layer, (off, n), cache in zip(reversed(net.layers), reversed(net.layout), reversed(caches)):
        if isinstance(layer, Affine):
            W, _ = _weights(layer, params.values[off:off + n])
            nw = W.size
            grad[off:off + nw] = (cache.T @ dout).ravel()
            grad[off + nw:off + n] = dout.sum(axis=0)
            dout = dout @ W.T
        elif isinstance(layer, Conv2D):
            W, _ = _weights(layer, params.values[off:off + n])
            in_shape, cols = cache
            k, s = layer.kernel, layer.stride
            nw = W.size
            grad[off:off + nw] = (cols.reshape(-1, cols.shape[-1]).T
                                  @ dout.reshape(-1, dout.shape[-1])).ravel()
            grad[off + nw:off + n] = dout.sum(axis=(0, 1, 2))
            dcols = (dout @ W.T).reshape(*dout.shape[:3], layer.in_channels, k, k)
            dx = np.zeros(in_shape)
            ho, wo = dout.shape[1], dout.shape[2]
            for i in range(k):
                for j in range(k):
                    dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[..., i, j]
            dout = dx
        elif isinstance(layer, ReLU):
            dout = dout * cache
        elif isinstance(layer, Flatten):
            dout = dout.reshape(cache)
    return grad, dout


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logits(net: NetworkSpec, params: ParamVector, batch) -> np.ndarray:
    x = _check(net, params, batch)
    out, _ = _forward(net, params, x)
    return out


def forward(net: NetworkSpec, params: ParamVector, batch) -> np.ndarray:
    """Per-sample class-probability rows, shape (N, classes)."""
    return _softmax(logits(net, params, batch))


def logits_and_pullback(net: NetworkSpec, params: ParamVector, batch
                        ) -> tuple[np.ndarray, Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]]:
    """Logits plus a closure mapping d(loss)/d(logits) to (param grad, input grad).

    Used where the loss is not plain cross-entropy, e.g. adversarial training
    that must push gradients through the discriminator into its inputs.
    """
    x = _check(net, params, batch)
    out, caches = _forward(net, params, x)

    def pullback(dlogits):
        return _backward(net, params, caches, np.asarray(dlogits, dtype=np.float64))

    return out, pullback


def _check_labels(labels, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {labels[i]} at sample {i} outside [0, {classes})")
    return labels.astype(np.int64)


def cross_entropy(z: np.ndarray, labels: np.ndarray) -> float:
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return float(np.mean(lse - z[np.arange(z.shape[0]), labels]))


def loss(net: NetworkSpec, params: ParamVector, batch, labels) -> float:
    x = _check(net, params, batch)
    if x.shape[0] == 0:
        raise ValueError("batch is empty")
    labels = _check_labels(labels, x.shape[0], net.num_classes)
    z, _ = _forward(net, params, x)
    return cross_entropy(z, labels)


def loss_and_grad(net: NetworkSpec, params: ParamVector, batch, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    x = _check(net, params, batch)
    n = x.shape[0]
    if n == 0:
        raise ValueError("batch is empty")
    labels = _check_labels(labels, n, net.num_classes)
    z, caches = _forward(net, params, x)
    p = _softmax(z)
    value = cross_entropy(z, labels)
    p[np.arange(n), labels] -= 1.0
    grad, _ = _backward(net, params, caches, p / n)
    return value, grad


@dataclass
class OptimizerState:
    lr: float
    momentum: float
    velocity: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        self.velocity = np.asarray(self.velocity, dtype=np.float64)

    @classmethod
    def zeros(cls, n: int, lr: float, momentum: float = 0.0) -> "OptimizerState":
        return cls(lr, momentum, np.zeros(n))


def sgd_step(params: ParamVector, grad: np.ndarray, state: OptimizerState) -> ParamVector:
    """One SGD step; updates ``state.velocity`` in place, returns new params.

    v' = momentum * v + g ;  w' = w - lr * v'
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not (len(params) == grad.size == state.velocity.size):
        raise ValueError(
            f"length mismatch: params {len(params)}, grad {grad.size}, velocity {state.velocity.size}"
        )
    if state.momentum == 0.0:
        state.velocity = grad.copy()
    else:
        state.velocity = state.momentum * state.velocity + grad
    return params.with_values(params.values - state.lr * state.velocity)


def finite_diff_grad(net: NetworkSpec, params: ParamVector, batch, labels, eps: float = 1e-5) -> np.ndarray:
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = _check(net, params, batch)
    base = params.values
    out = np.empty_like(base)
    probe = base.copy()
    for i in range(base.size):
        probe[i] = base[i] + eps
        up = loss(net, ParamVector(probe, params.layout), x, labels)
        probe[i] = base[i] - eps
        down = loss(net, ParamVector(probe, params.layout), x, labels)
        probe[i] = base[i]
        out[i] = (up - down) / (2 * eps)
    return out
