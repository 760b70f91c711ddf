"""Rewrite an expanded network as a sum of independent member networks.

Orders are grouped into consecutive clusters such as ``[2, 1, 1]``. Member m
holds, in every hidden weight layer, the sum of the residues of its cluster.
Only member 1 carries biases. By default the output layer is linear and
shared: every member applies the full expanded output kernel, so the sum of
the members' logits equals the expansion exactly whenever no ReLU changes
regime. ``final_layer="split"`` splits the output layer by cluster too.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np

from .bounds import activation_after, check_boundable, clusters, ensemble_bound
from .errors import ShapeError, StructureError
from .model import Activation, BatchNorm, Network
from .quantizer import ResidualExpansion


@dataclass(frozen=True)
class Grouping:
    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.sizes)
        if not sizes or any(k < 1 for k in sizes):
            raise ValueError(f"grouping sizes must be positive ints, got {self.sizes}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def parse(cls, text: str) -> "Grouping":
        return cls(tuple(int(part) for part in text.split(",")))

    @property
    def order(self) -> int:
        return sum(self.sizes)

    @property
    def members(self) -> int:
        return len(self.sizes)

    def __iter__(self):
        return iter(self.sizes)

    def __str__(self):
        return ",".join(map(str, self.sizes))


@dataclass(frozen=True, eq=False)
class EnsembleNetwork:
    members: tuple
    grouping: Grouping
    final_layer: str = "shared"

    @property
    def input_shape(self):
        return self.members[0].input_shape

    def forward_batch(self, xs) -> np.ndarray:
        # fixed summation order (member 1 first) keeps results reproducible
        out = self.members[0].forward_batch(xs)
        for member in self.members[1:]:
            out = out + member.forward_batch(xs)
        return out


def _check_ensemblable(net: Network):
    check_boundable(net)
    if any(isinstance(layer, BatchNorm) for layer in net.layers):
        raise StructureError("fold batch norms before building an ensemble")


def build_ensemble(
    net: Network,
    expansion: ResidualExpansion,
    grouping,
    final_layer: str = "shared",
) -> EnsembleNetwork:
    if final_layer not in ("shared", "split"):
        raise ValueError(f"final_layer must be 'shared' or 'split', got {final_layer!r}")
    grouping = grouping if isinstance(grouping, Grouping) else Grouping(tuple(grouping))
    if grouping.order != expansion.order:
        raise ValueError(f"grouping {list(grouping)} does not sum to order {expansion.order}")
    _check_ensemblable(net)
    indices = net.weight_layer_indices()
    if final_layer == "shared" and indices and activation_after(net, indices[-1]) != "identity":
        raise StructureError("a shared output layer must not be followed by a nonlinearity")
    shared = indices[-1] if final_layer == "shared" and len(indices) >= 2 else None

    members = []
    for m, orders in enumerate(clusters(grouping.sizes)):
        layers = list(net.layers)
        for i in indices:
            layer_exp = expansion[i]
            selected = range(1, layer_exp.order + 1) if i == shared else orders
            weight = np.zeros(layer_exp.shape)
            for k in selected:
                weight = weight + layer_exp.terms[k - 1].weight
            bias = net.layers[i].bias if m == 0 else None
            layers[i] = dataclasses.replace(net.layers[i], weight=weight, bias=bias)
        members.append(net.with_layers(layers))
    return EnsembleNetwork(tuple(members), grouping, final_layer)


def ensemble_forward(ens: EnsembleNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != ens.input_shape:
        raise ShapeError(f"input shape {x.shape} != ensemble input shape {ens.input_shape}")
    return ens.forward_batch(x[None])[0]


def candidate_groupings(K: int, max_members: Optional[int] = None) -> List[Grouping]:
    """All non-increasing partitions of ``K``, most members last."""
    out = []

    def walk(remaining, cap, prefix):
        if remaining == 0:
            out.append(Grouping(tuple(prefix)))
            return
        for size in range(min(cap, remaining), 0, -1):
            walk(remaining - size, size, prefix + [size])

    walk(K, K, [])
    if max_members is not None:
        out = [g for g in out if g.members <= max_members]
    return sorted(out, key=lambda g: g.members)


def select_grouping(
    net: Network,
    expansion: ResidualExpansion,
    candidates: Iterable,
    logit_norm_estimate: float,
    threshold_ratio: float = 0.1,
    final_layer: str = "shared",
) -> Grouping:
    """Most balanced candidate whose ensemble bound is small next to the logits.

    A candidate qualifies when ``U <= threshold_ratio * logit_norm_estimate``.
    Among qualifying candidates the smallest largest-member wins; ties go to
    the smaller bound, then to the earlier candidate. Falls back to ``[K]``.
    """
    if logit_norm_estimate <= 0:
        raise ValueError("logit norm estimate must be positive")
    fallback = Grouping((expansion.order,))
    candidates = [c if isinstance(c, Grouping) else Grouping(tuple(c)) for c in candidates]
    if not candidates:
        raise ValueError("no candidate groupings given")
    if threshold_ratio <= 0:
        return fallback
    limit = threshold_ratio * logit_norm_estimate
    best, best_key = None, None
    for pos, grouping in enumerate(candidates):
        if grouping.order != expansion.order:
            continue
        U = ensemble_bound(net, expansion, grouping, final_layer).U
        if U > limit:
            continue
        key = (max(grouping.sizes), U, pos)
        if best_key is None or key < best_key:
            best, best_key = grouping, key
    return best if best is not None else fallback


def logit_norm_from_inputs(model, xs) -> float:
    """Mean L2 norm of the model's outputs over ``xs``."""
    out = model.forward_batch(np.asarray(xs, dtype=np.float64))
    return float(np.mean(np.linalg.norm(out.reshape(out.shape[0], -1), axis=1)))


def logit_norm_from_batch_norm(net: Network) -> float:
    """Data-free logit norm estimate from a network ending in BatchNorm.

    Each normalized logit is modelled as N(beta_c, gamma_c^2), giving
    ``E||f||^2 = sum_c beta_c^2 + gamma_c^2``.
    """
    tail = [layer for layer in net.layers if not isinstance(layer, Activation)]
    if not tail or not isinstance(tail[-1], BatchNorm):
        raise StructureError("the network does not end in a BatchNorm layer")
    bn = tail[-1]
    return float(np.sqrt(np.sum(bn.beta ** 2 + bn.gamma ** 2)))
