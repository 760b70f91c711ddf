"""Worst-case error bounds for residual expansions.

All network bounds assume a folded network (no BatchNorm) whose hidden
activations are ReLU or identity, and inputs of unit L2 norm. Per-weight
bounds are expressed through ``lambda``, the order-1 per-channel
quantization step ``max|W_c| / (2^(b-1) - 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import StructureError
from .model import Activation, BatchNorm, Network, spectral_norm
from .quantizer import LayerExpansion, ResidualExpansion, _channels_first

# fraction of units assumed to sit on opposite sides of the ReLU kink when a
# pre-activation is split between ensemble members
SPLIT_PROBABILITY = 0.5


@dataclass
class BoundReport:
    """Certified logit error for unit-norm inputs.

    ``per_layer_terms`` holds one pair per weight layer. For the dense,
    sparse and main-text kinds the pair is (spectral norm, weight bound);
    for the ensemble kind it is (summed residue norms of the layer, summed
    residue norms outside the first member).
    """

    kind: str
    U: float
    per_layer_terms: List[tuple]
    params: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "U": float(self.U),
            "per_layer_terms": [[float(a), float(b)] for a, b in self.per_layer_terms],
            "params": dict(self.params),
        }


def first_order_step(layer_exp: LayerExpansion) -> np.ndarray:
    """Per-channel ``max|W_c| / qmax``, zero for all-zero channels."""
    peak = np.abs(_channels_first(layer_exp.source, layer_exp.config.axis)).max(axis=1)
    return peak / layer_exp.config.qmax


def _check_order(layer_exp: LayerExpansion, K: int):
    if not 1 <= K <= layer_exp.order:
        raise ValueError(f"order {K} outside the expansion's 1..{layer_exp.order}")


def weight_bound(layer_exp: LayerExpansion, K: int) -> np.ndarray:
    """Per-channel bound on ``|w - (R^1 + ... + R^K)|``.

    ``(1/qmax)^(n-1) * lambda / 2`` where ``n`` is the number of the first
    ``K`` orders that kept the channel (``n == K`` without masks).
    """
    _check_order(layer_exp, K)
    kept = layer_exp.kept_orders(K)
    return (1.0 / layer_exp.config.qmax) ** (kept - 1) * first_order_step(layer_exp) / 2.0


def channel_errors(layer_exp: LayerExpansion, K: int) -> np.ndarray:
    """Per-channel max-abs reconstruction error after ``K`` orders."""
    err = layer_exp.source - layer_exp.partial_sum(K)
    return np.abs(_channels_first(err, layer_exp.config.axis)).max(axis=1)


def sparse_weight_bound(layer_exp: LayerExpansion, K: int) -> np.ndarray:
    """Per-channel bound when order ``K`` is a masked (sparse) order.

    Channels pruned at order K get ``||N 1_gamma||_inf * lambda / (qmax^K * 2)``
    where ``N`` is their residual error in units of ``lambda / (qmax^K * 2)``
    and the norm is 1 when nothing is pruned. Channels kept at order K fall
    back to :func:`weight_bound`.
    """
    _check_order(layer_exp, K)
    mask = layer_exp.terms[K - 1].mask
    if mask is None:
        raise ValueError(f"order {K} carries no mask")
    qmax = layer_exp.config.qmax
    unit = first_order_step(layer_exp) / (qmax ** K * 2.0)
    pruned = mask.pruned_rows
    err = channel_errors(layer_exp, K)
    if pruned.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            normalized = np.where(unit > 0, err / unit, 0.0)
        n_inf = float(normalized[pruned].max())
    else:
        n_inf = 1.0
    return np.where(pruned, n_inf * unit, weight_bound(layer_exp, K))


def compounded_error(norms: Sequence[float], weight_bounds: Sequence[float]) -> float:
    """``prod_l (sum_{i<=l} s_i u_i + 1) - 1``."""
    total, running = 1.0, 0.0
    for s, u in zip(norms, weight_bounds):
        running += s * u
        total *= running + 1.0
    return total - 1.0


def check_boundable(net: Network):
    for i, layer in enumerate(net.layers):
        if isinstance(layer, BatchNorm):
            raise StructureError(f"layer {i} is a BatchNorm; fold the network first")
        if isinstance(layer, Activation) and layer.kind not in ("relu", "identity"):
            raise StructureError(f"layer {i}: bounds only cover relu/identity, got {layer.kind}")


def layer_spectral_norms(net: Network) -> list:
    return [spectral_norm(net.layers[i].weight) for i in net.weight_layer_indices()]


def network_bound(
    net: Network,
    expansion: ResidualExpansion,
    kind: str = "dense",
    spectral_norms: Optional[Sequence[float]] = None,
) -> BoundReport:
    if kind not in ("dense", "sparse"):
        raise ValueError(f"kind must be 'dense' or 'sparse', got {kind!r}")
    check_boundable(net)
    indices = net.weight_layer_indices()
    norms = list(spectral_norms) if spectral_norms is not None else layer_spectral_norms(net)
    per_weight = sparse_weight_bound if kind == "sparse" else weight_bound
    u = [float(per_weight(expansion[i], expansion.order).max()) for i in indices]
    return BoundReport(
        kind=kind,
        U=compounded_error(norms, u),
        per_layer_terms=list(zip(norms, u)),
        params=_params(expansion),
    )


def main_text_bound(net: Network, expansion: ResidualExpansion) -> BoundReport:
    """Variant without spectral norms: per-layer term ``(1/qmax)^(K-1) * s / 2``.

    ``s`` is the largest order-1 channel scale of the layer.
    """
    check_boundable(net)
    K, qmax = expansion.order, expansion.config.qmax
    u = [(1.0 / qmax) ** (K - 1) * float(first_order_step(expansion[i]).max()) / 2.0
         for i in net.weight_layer_indices()]
    return BoundReport(
        kind="main_text",
        U=compounded_error([1.0] * len(u), u),
        per_layer_terms=[(1.0, x) for x in u],
        params=_params(expansion),
    )


def _params(expansion: ResidualExpansion, grouping=None) -> dict:
    params = {
        "bits": expansion.config.bits,
        "order": expansion.order,
        "gamma": expansion.gamma,
        "mask_from_order": expansion.from_order,
    }
    if grouping is not None:
        params["grouping"] = list(grouping)
    return params


def clusters(sizes: Sequence[int]) -> list:
    """Orders (1-based) covered by each member: member m takes the next sizes[m]."""
    out, start = [], 1
    for size in sizes:
        out.append(list(range(start, start + size)))
        start += size
    return out


def activation_after(net: Network, weight_index: int) -> str:
    """Activation applied between a weight layer and the next one."""
    kind = "identity"
    for layer in net.layers[weight_index + 1:]:
        if not isinstance(layer, Activation):
            break
        if layer.kind != "identity":
            kind = layer.kind
    return kind


def _grouping_sizes(grouping) -> list:
    sizes = list(getattr(grouping, "sizes", grouping))
    if not sizes or any(int(k) < 1 for k in sizes):
        raise ValueError(f"grouping needs positive sizes, got {sizes}")
    return [int(k) for k in sizes]


def ensemble_bound(
    net: Network,
    expansion: ResidualExpansion,
    grouping,
    final_layer: str = "shared",
) -> BoundReport:
    """Bound on ``|expansion(x) - ensemble(x)|`` for ``||x|| = 1``.

    Tracks, layer by layer, an upper bound ``D`` on the gap between the
    expanded hidden activation and the sum of the members' activations,
    plus a norm bound on each member's activation. A hidden layer adds

    * the gap carried in from below, times the layer norm;
    * cross terms: member m's kernel never sees the other members' inputs;
    * the activation split: ReLU(sum p_m) differs from sum ReLU(p_m) by at
      most the members m >= 2, weighted by ``SPLIT_PROBABILITY``.

    With ``final_layer="shared"`` every member applies the full last kernel,
    so the output gap is ``||W_L|| * D``. For two layers and two members this
    is ``1/2 * sum_k ||R_2^k|| * sum_{k > K_1} ||R_1^k||``.
    Residue norms are spectral norms of the dequantized kernels.
    """
    if final_layer not in ("shared", "split"):
        raise ValueError(f"final_layer must be 'shared' or 'split', got {final_layer!r}")
    check_boundable(net)
    sizes = _grouping_sizes(grouping)
    if sum(sizes) != expansion.order:
        raise ValueError(f"grouping {sizes} does not sum to expansion order {expansion.order}")
    indices = net.weight_layer_indices()
    if indices and activation_after(net, indices[-1]) != "identity":
        raise StructureError("ensemble bound needs a linear output layer")
    members = clusters(sizes)
    M, L = len(members), len(indices)

    norms = []  # norms[l][m]: summed residue norms of member m at layer l
    for i in indices:
        residue = [spectral_norm(w) for w in expansion[i].weights()]
        norms.append([sum(residue[k - 1] for k in orders) for orders in members])
    terms = [(sum(a), sum(a[1:])) for a in norms]

    hidden = L - 1 if (final_layer == "shared" and L >= 2) else L
    gap = 0.0
    member_norm = [1.0] * M
    for l in range(hidden):
        a = norms[l]
        if l == 0:
            # every member reads the same input: no cross terms yet
            carried = 0.0
        else:
            carried = sum(a) * gap + sum(
                a[m] * (sum(member_norm) - member_norm[m]) for m in range(M))
        is_last = l == L - 1
        kind = "identity" if is_last else activation_after(net, indices[l])
        split_weight = SPLIT_PROBABILITY if kind == "relu" else 0.0
        split = split_weight * sum(a[m] * member_norm[m] for m in range(1, M))
        gap = carried + split
        bias = net.layers[indices[l]].bias
        bias_norm = 0.0 if bias is None else float(np.linalg.norm(bias))
        member_norm = [a[0] * member_norm[0] + bias_norm] + [
            a[m] * member_norm[m] for m in range(1, M)]
    U = sum(norms[-1]) * gap if hidden < L else gap
    return BoundReport(
        kind="ensemble",
        U=float(U),
        per_layer_terms=terms,
        params={**_params(expansion, sizes), "final_layer": final_layer},
    )
