"""Minimal feed-forward network representation and reference evaluation.

Tensors are plain float64 numpy arrays. Every array handed to a layer is
copied and frozen (``writeable=False``) so that networks can be shared
between threads without defensive copies.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from .errors import ConvergenceError, ShapeError, StructureError

ACTIVATIONS = ("relu", "identity", "sigmoid", "gelu")
PADDINGS = ("same", "valid")


def as_tensor(data, name: str = "tensor") -> np.ndarray:
    """Return a frozen float64 copy of ``data``, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: tensor contains non-finite values")
    arr.setflags(write=False)
    return arr


def _optional_tensor(data, name):
    return None if data is None else as_tensor(data, name)


@dataclass(frozen=True, eq=False)
class Dense:
    """Fully connected layer ``y = W x + b`` with ``W`` of shape (out, in).

    Multi-dimensional inputs are flattened in row-major order first.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "weight", as_tensor(self.weight, "dense weight"))
        object.__setattr__(self, "bias", _optional_tensor(self.bias, "dense bias"))
        if self.weight.ndim != 2 or 0 in self.weight.shape:
            raise ShapeError(f"dense weight must be a non-empty 2-D tensor, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"dense bias length {self.bias.shape} != output dim {self.weight.shape[0]}"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class Conv2D:
    """2-D convolution over (C, H, W) inputs with a square [out, in, d, d] kernel."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        object.__setattr__(self, "weight", as_tensor(self.weight, "conv weight"))
        object.__setattr__(self, "bias", _optional_tensor(self.bias, "conv bias"))
        w = self.weight
        if w.ndim != 4 or 0 in w.shape:
            raise ShapeError(f"conv weight must be a non-empty 4-D tensor, got {w.shape}")
        if w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv kernels must be square, got {w.shape[2]}x{w.shape[3]}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ShapeError(f"conv bias length {self.bias.shape} != out channels {w.shape[0]}")
        if not isinstance(self.stride, (int, np.integer)) or self.stride < 1:
            raise ValueError(f"conv stride must be a positive int, got {self.stride!r}")
        if self.padding not in PADDINGS:
            raise ValueError(f"conv padding must be one of {PADDINGS}, got {self.padding!r}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass(frozen=True, eq=False)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for field in ("gamma", "beta", "mean", "var"):
            object.__setattr__(self, field, as_tensor(getattr(self, field), f"batchnorm {field}"))
        shapes = {self.gamma.shape, self.beta.shape, self.mean.shape, self.var.shape}
        if len(shapes) != 1 or self.gamma.ndim != 1:
            raise ShapeError("batchnorm parameters must be 1-D vectors of equal length")
        if np.any(self.var < 0):
            raise ValueError("batchnorm variance must be non-negative")
        if self.eps < 0:
            raise ValueError("batchnorm eps must be non-negative")

    def scale(self) -> np.ndarray:
        return self.gamma / np.sqrt(self.var + self.eps)


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")


Layer = Union[Dense, Conv2D, BatchNorm, Activation]
WEIGHT_LAYERS = (Dense, Conv2D)


def _conv_geometry(size: int, kernel: int, stride: int, padding: str):
    """Return (output size, pad before, pad after) along one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2, total - total // 2
    if size < kernel:
        raise ShapeError(f"valid conv needs input >= kernel, got {size} < {kernel}")
    return (size - kernel) // stride + 1, 0, 0


def layer_output_shape(layer: Layer, in_shape: tuple) -> tuple:
    if isinstance(layer, Dense):
        n_in = int(np.prod(in_shape))
        if n_in != layer.weight.shape[1]:
            raise ShapeError(f"dense expects {layer.weight.shape[1]} inputs, got shape {in_shape}")
        return (layer.weight.shape[0],)
    if isinstance(layer, Conv2D):
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects a (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if c != layer.weight.shape[1]:
            raise ShapeError(f"conv expects {layer.weight.shape[1]} input channels, got {c}")
        oh, _, _ = _conv_geometry(h, layer.kernel_size, layer.stride, layer.padding)
        ow, _, _ = _conv_geometry(w, layer.kernel_size, layer.stride, layer.padding)
        return (layer.out_channels, oh, ow)
    if isinstance(layer, BatchNorm):
        if in_shape[0] != layer.gamma.shape[0]:
            raise ShapeError(f"batchnorm over {layer.gamma.shape[0]} channels got {in_shape}")
        return tuple(in_shape)
    if isinstance(layer, Activation):
        return tuple(in_shape)
    raise StructureError(f"unsupported layer type {type(layer).__name__}")


@dataclass(frozen=True, eq=False)
class Network:
    """Sequential feed-forward network. Shapes are checked on construction."""

    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        shape = tuple(int(d) for d in self.input_shape)
        if not shape or any(d < 1 for d in shape):
            raise ShapeError(f"input shape must be positive ints, got {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        shapes = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer_output_shape(layer, shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
            shapes.append(shape)
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1] if self.shapes else self.input_shape

    def layer_input_shape(self, index: int) -> tuple:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def weight_layer_indices(self) -> list:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, WEIGHT_LAYERS)]

    def forward_batch(self, xs) -> np.ndarray:
        """Evaluate a batch of inputs of shape (N, *input_shape)."""
        xs = np.asarray(xs, dtype=np.float64)
        if xs.shape[1:] != self.input_shape:
            raise ShapeError(f"expected batch of {self.input_shape}, got {xs.shape[1:]}")
        h = xs
        for layer in self.layers:
            h = apply_layer(layer, h)
        return h

    def with_layers(self, layers) -> "Network":
        return Network(tuple(layers), self.input_shape)


def _conv_batch(layer: Conv2D, h: np.ndarray) -> np.ndarray:
    d, s = layer.kernel_size, layer.stride
    _, _, H, W = h.shape
    _, top, bottom = _conv_geometry(H, d, s, layer.padding)
    _, left, right = _conv_geometry(W, d, s, layer.padding)
    if top or bottom or left or right:
        h = np.pad(h, ((0, 0), (0, 0), (top, bottom), (left, right)))
    windows = np.lib.stride_tricks.sliding_window_view(h, (d, d), axis=(2, 3))
    windows = windows[:, :, ::s, ::s]
    out = np.einsum("nchwij,ocij->nohw", windows, layer.weight, optimize=True)
    if layer.bias is not None:
        out = out + layer.bias[None, :, None, None]
    return out


def apply_layer(layer: Layer, h: np.ndarray) -> np.ndarray:
    """Apply one layer to a batch ``h`` whose first axis indexes samples."""
    if isinstance(layer, Dense):
        out = h.reshape(h.shape[0], -1) @ layer.weight.T
        return out + layer.bias if layer.bias is not None else out
    if isinstance(layer, Conv2D):
        return _conv_batch(layer, h)
    if isinstance(layer, BatchNorm):
        expand = (slice(None),) + (None,) * (h.ndim - 2)
        scale = layer.scale()
        return (h - layer.mean[expand]) * scale[expand] + layer.beta[expand]
    if isinstance(layer, Activation):
        return activate(layer.kind, h)
    raise StructureError(f"unsupported layer type {type(layer).__name__}")


def activate(kind: str, h: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "identity":
        return h
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * h))
    if kind == "gelu":
        return 0.5 * h * (1.0 + erf(h / np.sqrt(2.0)))
    raise ValueError(f"unknown activation {kind!r}")


def forward(net: Network, x) -> np.ndarray:
    """Evaluate ``net`` on a single input whose shape equals ``net.input_shape``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} != network input shape {net.input_shape}")
    return net.forward_batch(x[None])[0]


def _fold_into(layer, bn: BatchNorm):
    scale = bn.scale()
    if layer.out_channels != scale.shape[0]:
        raise StructureError("batchnorm width does not match the preceding layer")
    bias = layer.bias if layer.bias is not None else np.zeros(layer.out_channels)
    expand = (slice(None),) + (None,) * (layer.weight.ndim - 1)
    return dataclasses.replace(
        layer,
        weight=layer.weight * scale[expand],
        bias=(bias - bn.mean) * scale + bn.beta,
    )


def fold_batch_norm(net: Network) -> Network:
    """Absorb every BatchNorm into the Dense/Conv2D layer right before it."""
    folded = []
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, BatchNorm):
            folded.append(layer)
            continue
        if not folded or not isinstance(folded[-1], WEIGHT_LAYERS):
            raise StructureError(f"batchnorm at layer {i} is not preceded by a dense or conv layer")
        folded[-1] = _fold_into(folded[-1], layer)
    return net.with_layers(folded)


def as_matrix(weight: np.ndarray) -> np.ndarray:
    """Flatten a dense or conv kernel to [out, in * d * d]."""
    weight = np.asarray(weight, dtype=np.float64)
    return weight.reshape(weight.shape[0], -1)


def spectral_norm(weight, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``.

    Conv kernels are flattened to [out, in * d * d] first. The estimate
    approaches the true value from below.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    W = as_matrix(weight)
    if W.size == 0:
        raise ValueError("spectral norm of an empty matrix")
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = W @ v
        new_sigma = float(np.linalg.norm(u))
        w = W.T @ u
        w_norm = np.linalg.norm(w)
        if w_norm == 0.0:
            # start vector landed in the null space
            v = np.random.default_rng(seed + 1).standard_normal(W.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = w / w_norm
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return float(np.linalg.norm(W @ v))
        sigma = new_sigma
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations", sigma)


def _evaluator(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "forward_batch"):
        return model.forward_batch
    if callable(model):
        return model
    raise TypeError(f"cannot evaluate object of type {type(model).__name__}")


def logits_max_error(f, g, xs: Union[np.ndarray, Sequence]) -> float:
    """Max over ``xs`` of the max-abs difference between the outputs of f and g."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 0 or xs.shape[0] == 0:
        raise ValueError("logits_max_error needs at least one input")
    diff = _evaluator(f)(xs) - _evaluator(g)(xs)
    return float(np.max(np.abs(diff)))
