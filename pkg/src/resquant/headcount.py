"""Bit-operation (BOPs) cost model.

A b-bit scalar multiplication is charged ``b * log2(b)`` bit operations;
full-precision multiplications are 32-bit. Additions are not counted. For a
d x d convolution with stride s over a D x D x n_i input and n_o outputs
(dense layers: D = d = s = 1)::

    original  = D^2 * d^2 n_i n_o / s^2 * 32 log2 32
    expanded  = D^2 * [(n_i + n_o / s^2) * 32 log2 32
                       + d^2 n_i n_o / s^2 * b log2 b * sum_k gamma_k]

The first bracket is the input quantization and output rescaling. A linear
``b`` accounting (``b`` instead of ``b log2 b``) is reported alongside.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from .bounds import clusters
from .model import Conv2D, Dense, Network

FLOAT_BITS = 32
FLOAT_MUL_BOPS = FLOAT_BITS * math.log2(FLOAT_BITS)  # 160


def int_mul_bops(bits: int) -> float:
    return bits * math.log2(bits)


@dataclass
class LayerCost:
    rescale_bops: float
    mac_bops: float
    mac_bops_linear: float
    params: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.rescale_bops + self.mac_bops

    @property
    def total_linear(self) -> float:
        return self.rescale_bops + self.mac_bops_linear

    def to_dict(self) -> dict:
        return {
            "rescale_bops": self.rescale_bops,
            "mac_bops": self.mac_bops,
            "mac_bops_linear": self.mac_bops_linear,
            "total": self.total,
            "total_linear": self.total_linear,
            "params": dict(self.params),
        }


def _check_dims(**dims):
    for name, value in dims.items():
        if value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")


def _macs(D, d, s, n_i, n_o) -> float:
    return D * D * d * d * n_i * n_o / (s * s)


def bops_original(D: int, d: int, s: int, n_i: int, n_o: int) -> float:
    _check_dims(D=D, d=d, s=s, n_i=n_i, n_o=n_o)
    return _macs(D, d, s, n_i, n_o) * FLOAT_MUL_BOPS


def original_cost(D: int, d: int, s: int, n_i: int, n_o: int) -> LayerCost:
    bops = bops_original(D, d, s, n_i, n_o)
    macs = _macs(D, d, s, n_i, n_o)
    return LayerCost(0.0, bops, macs * FLOAT_BITS,
                     dict(D=D, d=d, s=s, n_i=n_i, n_o=n_o, b=FLOAT_BITS, K=0, gamma=[]))


def bops_expanded(D: int, d: int, s: int, n_i: int, n_o: int, b: int, K: int,
                  gamma_per_order: Optional[Sequence[float]] = None) -> LayerCost:
    """Cost of a layer expanded to ``K`` orders; ``gamma_per_order[k]`` is the
    fraction of output channels order k+1 keeps (order 1 is always dense)."""
    _check_dims(D=D, d=d, s=s, n_i=n_i, n_o=n_o)
    if b < 2:
        raise ValueError(f"bits must be >= 2, got {b}")
    if K < 1:
        raise ValueError(f"order must be >= 1, got {K}")
    gammas = [1.0] * K if gamma_per_order is None else [float(g) for g in gamma_per_order]
    if len(gammas) != K:
        raise ValueError(f"expected {K} gamma values, got {len(gammas)}")
    if gammas[0] != 1.0 or any(not 0.0 <= g <= 1.0 for g in gammas):
        raise ValueError(f"invalid gamma list {gammas}: need gamma_1 = 1 and all in [0, 1]")
    rescale = D * D * (n_i + n_o / (s * s)) * FLOAT_MUL_BOPS
    macs = _macs(D, d, s, n_i, n_o) * sum(gammas)
    return LayerCost(rescale, macs * int_mul_bops(b), macs * b,
                     dict(D=D, d=d, s=s, n_i=n_i, n_o=n_o, b=b, K=K, gamma=gammas))


def layer_geometry(net: Network, index: int) -> dict:
    layer = net.layers[index]
    in_shape = net.layer_input_shape(index)
    if isinstance(layer, Dense):
        return dict(D=1, d=1, s=1, n_i=layer.weight.shape[1], n_o=layer.weight.shape[0])
    if isinstance(layer, Conv2D):
        _, H, W = in_shape
        if H != W:
            raise ValueError(f"cost model needs square feature maps, layer {index} sees {H}x{W}")
        return dict(D=H, d=layer.kernel_size, s=layer.stride,
                    n_i=layer.weight.shape[1], n_o=layer.weight.shape[0])
    raise TypeError(f"layer {index} has no weights")


@dataclass
class CostReport:
    original: List[LayerCost]
    expanded: Optional[List[LayerCost]] = None
    members: Optional[List[List[LayerCost]]] = None
    notes: List[str] = field(default_factory=list)

    @staticmethod
    def _sum(costs, attr="total") -> float:
        return float(sum(getattr(c, attr) for c in costs))

    @property
    def original_total(self) -> float:
        return self._sum(self.original)

    @property
    def expanded_total(self) -> Optional[float]:
        return None if self.expanded is None else self._sum(self.expanded)

    @property
    def member_totals(self) -> Optional[List[float]]:
        return None if self.members is None else [self._sum(m) for m in self.members]

    @property
    def combined_total(self) -> Optional[float]:
        return None if self.members is None else sum(self.member_totals)

    @property
    def critical_path(self) -> Optional[float]:
        """Largest member total: the cost when members run in parallel."""
        return None if self.members is None else max(self.member_totals)

    def to_dict(self) -> dict:
        out = {
            "original": {"layers": [c.to_dict() for c in self.original],
                         "total": self.original_total},
            "notes": list(self.notes),
        }
        base = self.original_total
        if self.expanded is not None:
            out["expanded"] = {
                "layers": [c.to_dict() for c in self.expanded],
                "total": self.expanded_total,
                "total_linear": self._sum(self.expanded, "total_linear"),
                "ratio_vs_original": self.expanded_total / base,
            }
        if self.members is not None:
            out["ensemble"] = {
                "members": [{"layers": [c.to_dict() for c in m], "total": t,
                             "total_linear": self._sum(m, "total_linear")}
                            for m, t in zip(self.members, self.member_totals)],
                "combined_total": self.combined_total,
                "critical_path": self.critical_path,
                "ratio_vs_original": self.combined_total / base,
                "critical_path_ratio_vs_original": self.critical_path / base,
            }
        return out


def _order_gammas(layer_exp, orders) -> list:
    gammas = []
    for k in orders:
        mask = layer_exp.terms[k - 1].mask
        gammas.append(1.0 if mask is None else mask.kept / layer_exp.channels)
    return gammas


def bops_network(net: Network, expansion=None, grouping=None,
                 final_layer: str = "shared") -> CostReport:
    """Per-layer and total costs of the original network and, when given, of
    its expansion and of the ensemble built from ``grouping``.

    Each ensemble member pays its own input/output rescaling.
    """
    indices = net.weight_layer_indices()
    geometry = [layer_geometry(net, i) for i in indices]
    report = CostReport(original=[original_cost(**g) for g in geometry])
    if expansion is None:
        return report
    b, K = expansion.config.bits, expansion.order
    report.expanded = [
        bops_expanded(**g, b=b, K=K, gamma_per_order=_order_gammas(expansion[i], range(1, K + 1)))
        for i, g in zip(indices, geometry)
    ]
    if grouping is None:
        return report
    sizes = list(getattr(grouping, "sizes", grouping))
    if sum(sizes) != K:
        raise ValueError(f"grouping {sizes} does not sum to order {K}")
    shared = indices[-1] if final_layer == "shared" and len(indices) >= 2 else None
    report.members = []
    for orders in clusters(sizes):
        member = []
        for i, g in zip(indices, geometry):
            own = list(range(1, K + 1)) if i == shared else orders
            gammas = _order_gammas(expansion[i], own)
            member.append(_member_cost(g, b, gammas))
        report.members.append(member)
    if shared is not None:
        report.notes.append("output layer shared: every member evaluates all orders of it")
    report.notes.append("each ensemble member pays its own rescaling term")
    return report


def _member_cost(g: dict, b: int, gammas: list) -> LayerCost:
    rescale = g["D"] ** 2 * (g["n_i"] + g["n_o"] / g["s"] ** 2) * FLOAT_MUL_BOPS
    macs = _macs(**g) * sum(gammas)
    return LayerCost(rescale, macs * int_mul_bops(b), macs * b,
                     dict(**g, b=b, K=len(gammas), gamma=gammas))
