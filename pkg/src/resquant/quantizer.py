"""Symmetric per-channel quantization and residual error expansion.

A weight tensor W is approximated by R^1 + ... + R^K where each term is the
dequantized quantization of what the previous terms left over::

    R^k = mask_k * deq(quant(W - R^1 - ... - R^{k-1}))

Every order gets fresh per-channel scales computed on its own residual, so
the per-element error shrinks by at least a factor 2 * (2^(b-1) - 1) per
unmasked order.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .model import WEIGHT_LAYERS, Network, apply_layer, as_tensor


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 8
    axis: int = 0

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be an int in [2, 16], got {self.bits!r}")

    @property
    def qmax(self) -> int:
        """Largest code magnitude. The clamp range is symmetric: [-qmax, qmax]."""
        return 2 ** (self.bits - 1) - 1


def _channels_first(W: np.ndarray, axis: int) -> np.ndarray:
    W = np.moveaxis(np.asarray(W, dtype=np.float64), axis, 0)
    return W.reshape(W.shape[0], -1)


def _broadcast(per_channel: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return np.reshape(per_channel, shape)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def compute_scales(W, cfg: QuantConfig) -> np.ndarray:
    """Per-channel scale ``max|W_c| / qmax``; all-zero channels get 1.0."""
    peak = np.abs(_channels_first(W, cfg.axis)).max(axis=1)
    scales = peak / cfg.qmax
    scales[peak == 0] = 1.0
    return scales


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    values: np.ndarray  # int32 codes, same shape as the source tensor
    scales: np.ndarray  # one per channel along ``axis``
    bits: int
    axis: int = 0

    def __post_init__(self):
        qmax = 2 ** (self.bits - 1) - 1
        if self.values.dtype != np.int32:
            raise TypeError("quantized values must be int32")
        if self.values.size and (self.values.max() > qmax or self.values.min() < -qmax - 1):
            raise ValueError("quantized values outside the b-bit range")
        if np.any(self.scales <= 0):
            raise ValueError("quantization scales must be positive")


def quantize(W, scales, cfg: QuantConfig) -> QuantizedTensor:
    W = np.asarray(W, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64).reshape(-1)
    if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
        raise ValueError("scales must be finite and strictly positive")
    if scales.shape[0] != W.shape[cfg.axis]:
        raise ValueError(f"got {scales.shape[0]} scales for {W.shape[cfg.axis]} channels")
    codes = round_half_away(W / _broadcast(scales, W.ndim, cfg.axis))
    codes = np.clip(codes, -cfg.qmax, cfg.qmax).astype(np.int32)
    codes.setflags(write=False)
    scales = scales.copy()
    scales.setflags(write=False)
    return QuantizedTensor(codes, scales, cfg.bits, cfg.axis)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.values * _broadcast(q.scales, q.values.ndim, q.axis)


@dataclass(frozen=True, eq=False)
class StructuredMask:
    """Output channels kept by a sparse residual order."""

    kept_rows: np.ndarray
    gamma: float

    @property
    def kept(self) -> int:
        return int(np.count_nonzero(self.kept_rows))

    @property
    def pruned_rows(self) -> np.ndarray:
        return ~self.kept_rows


def kept_count(gamma: float, rows: int) -> int:
    # the small slack absorbs products like (2/3) * 3 = 2.0000000000000004
    return min(rows, max(1, math.ceil(gamma * rows - 1e-9)))


def make_structured_mask(residual_error, gamma: float, axis: int = 0) -> StructuredMask:
    """Keep the ceil(gamma * rows) channels with the largest residual L2 norm.

    Ties go to the lower channel index.
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    norms = np.linalg.norm(_channels_first(residual_error, axis), axis=1)
    rows = norms.shape[0]
    order = np.lexsort((np.arange(rows), -norms))
    kept = np.zeros(rows, dtype=bool)
    kept[order[: kept_count(gamma, rows)]] = True
    kept.setflags(write=False)
    return StructuredMask(kept, float(gamma))


@dataclass(frozen=True, eq=False)
class ResidualTerm:
    quantized: QuantizedTensor
    mask: Optional[StructuredMask] = None

    @property
    def weight(self) -> np.ndarray:
        """Dequantized kernel with pruned channels zeroed."""
        w = dequantize(self.quantized)
        if self.mask is not None:
            keep = _broadcast(self.mask.kept_rows, w.ndim, self.quantized.axis)
            w = np.where(keep, w, 0.0)
        return w

    @property
    def scales(self) -> np.ndarray:
        return self.quantized.scales


@dataclass(frozen=True, eq=False)
class LayerExpansion:
    """Residual expansion (R^1, ..., R^K) of one weight tensor."""

    terms: tuple
    config: QuantConfig
    source: np.ndarray  # full-precision weights the expansion approximates

    @property
    def order(self) -> int:
        return len(self.terms)

    @property
    def shape(self) -> tuple:
        return self.source.shape

    @property
    def channels(self) -> int:
        return self.source.shape[self.config.axis]

    def weights(self) -> list:
        return [term.weight for term in self.terms]

    def partial_sum(self, k: Optional[int] = None) -> np.ndarray:
        """Sum of the first ``k`` dequantized terms (all terms by default)."""
        k = self.order if k is None else k
        total = np.zeros(self.shape)
        for term in self.terms[:k]:
            total = total + term.weight
        return total

    def kept_orders(self, k: Optional[int] = None) -> np.ndarray:
        """Per channel, how many of the first ``k`` orders kept that channel."""
        k = self.order if k is None else k
        counts = np.zeros(self.channels, dtype=int)
        for term in self.terms[:k]:
            counts += 1 if term.mask is None else term.mask.kept_rows.astype(int)
        return counts


def expand(
    W,
    cfg: QuantConfig,
    K: int,
    gamma: float = 1.0,
    from_order: int = 2,
) -> LayerExpansion:
    """Residual expansion of order ``K``.

    Orders ``>= from_order`` are restricted to ``ceil(gamma * channels)``
    channels; ``from_order > K`` disables masking. Order 1 is never masked.
    The residual carried into the next order subtracts the masked term.
    """
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise ValueError(f"expansion order must be a positive int, got {K!r}")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if from_order < 2:
        raise ValueError("the first order is never masked: from_order must be >= 2")
    source = as_tensor(W, "weight")
    residual = np.array(source)
    terms = []
    for k in range(1, K + 1):
        mask = make_structured_mask(residual, gamma, cfg.axis) if k >= from_order else None
        q = quantize(residual, compute_scales(residual, cfg), cfg)
        term = ResidualTerm(q, mask)
        terms.append(term)
        residual = residual - term.weight
    return LayerExpansion(tuple(terms), cfg, source)


@dataclass(frozen=True, eq=False)
class ResidualExpansion:
    """Expansions for every Dense/Conv2D layer of a network, keyed by layer index."""

    layers: Dict[int, LayerExpansion]
    config: QuantConfig
    order: int
    gamma: float = 1.0
    from_order: int = 2

    def __getitem__(self, index: int) -> LayerExpansion:
        return self.layers[index]


def expand_network(
    net: Network, cfg: QuantConfig, K: int, gamma: float = 1.0, from_order: int = 2
) -> ResidualExpansion:
    layers = {i: expand(net.layers[i].weight, cfg, K, gamma, from_order)
              for i in net.weight_layer_indices()}
    return ResidualExpansion(layers, cfg, K, gamma, from_order)


def expanded_network(net: Network, expansion: ResidualExpansion, orders: Optional[Sequence[int]] = None,
                     keep_bias: bool = True) -> Network:
    """Network whose weight layers use the sum of the selected orders (1-based).

    ``orders=None`` selects every order.
    """
    layers = list(net.layers)
    for i, layer_exp in expansion.layers.items():
        selected = range(1, layer_exp.order + 1) if orders is None else orders
        weight = np.zeros(layer_exp.shape)
        for k in selected:
            weight = weight + layer_exp.terms[k - 1].weight
        bias = layers[i].bias if keep_bias else None
        layers[i] = dataclasses.replace(layers[i], weight=weight, bias=bias)
    return net.with_layers(layers)


@dataclass(frozen=True, eq=False)
class FusedKernel:
    """A single layer holding every order's kernel, concatenated on the output axis.

    ``summation[j]`` is the logical output channel that fused channel ``j``
    adds into.
    """

    layer: object
    summation: np.ndarray
    out_channels: int

    def forward_batch(self, h: np.ndarray) -> np.ndarray:
        fused = apply_layer(self.layer, h)
        out = np.zeros((fused.shape[0], self.out_channels) + fused.shape[2:])
        # deterministic accumulation in fused-channel order
        np.add.at(out, (slice(None), self.summation), fused)
        return out


def fuse_kernels(layer_exp: LayerExpansion, layer) -> FusedKernel:
    """Concatenate all orders of ``layer_exp`` into one Dense/Conv2D layer.

    Pruned channels are dropped from the fused kernel. The original bias of
    ``layer`` is attached to the order-1 block only.
    """
    if not isinstance(layer, WEIGHT_LAYERS):
        raise TypeError("fuse_kernels needs the Dense or Conv2D layer being expanded")
    if layer_exp.config.axis != 0:
        raise ValueError("kernel fusion requires channels on axis 0")
    blocks, rows, biases = [], [], []
    channels = np.arange(layer_exp.channels)
    for k, term in enumerate(layer_exp.terms):
        kept = channels if term.mask is None else channels[term.mask.kept_rows]
        blocks.append(term.weight[kept])
        rows.append(kept)
        if layer.bias is not None:
            biases.append(layer.bias[kept] if k == 0 else np.zeros(len(kept)))
    bias = np.concatenate(biases) if biases else None
    fused = dataclasses.replace(layer, weight=np.concatenate(blocks, axis=0), bias=bias)
    summation = np.concatenate(rows)
    summation.setflags(write=False)
    return FusedKernel(fused, summation, layer_exp.channels)
