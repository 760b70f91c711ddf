"""End-to-end run: fold, expand, optionally ensemble, then bound and cost.

The report is a canonical JSON document (sorted keys, shortest round-trip
floats, trailing newline), so two runs with the same container, config and
seed produce byte-identical files. Wall-clock timing is only included on
request because it would break that property.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import bounds as bnd
from .container import load_model, save_model
from .ensemble import (
    EnsembleNetwork,
    Grouping,
    build_ensemble,
    candidate_groupings,
    logit_norm_from_batch_norm,
    logit_norm_from_inputs,
    select_grouping,
)
from .errors import InvariantError, ShapeError, StructureError
from .headcount import bops_network
from .model import Activation, Network, apply_layer, fold_batch_norm, logits_max_error
from .quantizer import QuantConfig, ResidualExpansion, expand_network, expanded_network, round_half_away

REPORT_VERSION = 1


@dataclass
class RunConfig:
    bits: int = 8
    order: int = 1
    sparsity: float = 1.0
    mask_from_order: int = 2
    grouping: Union[None, str, Sequence[int]] = None  # sizes, or "auto"
    candidates: Optional[Sequence[Sequence[int]]] = None  # for "auto"; default: all partitions
    threshold_ratio: float = 0.1
    final_layer: str = "shared"
    activation_bits: Optional[int] = None
    seed: int = 0
    calibration_inputs: Optional[str] = None
    probe_inputs: int = 256

    def __post_init__(self):
        QuantConfig(self.bits)
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if not 0 < self.sparsity <= 1:
            raise ValueError("sparsity (fraction of channels kept) must lie in (0, 1]")
        if self.mask_from_order < 2:
            raise ValueError("mask_from_order must be >= 2")
        if isinstance(self.grouping, str) and self.grouping != "auto":
            self.grouping = Grouping.parse(self.grouping).sizes
        if self.grouping not in (None, "auto"):
            self.grouping = Grouping(tuple(self.grouping)).sizes
            if sum(self.grouping) != self.order:
                raise ValueError(f"grouping {list(self.grouping)} does not sum to order {self.order}")
        if self.threshold_ratio < 0:
            raise ValueError("threshold_ratio must be non-negative")
        if self.activation_bits is not None:
            QuantConfig(self.activation_bits)

    def echo(self) -> dict:
        out = asdict(self)
        for key in ("grouping", "candidates"):
            if isinstance(out[key], (tuple, list)):
                out[key] = [list(c) if isinstance(c, (tuple, list)) else c for c in out[key]]
        return out


@dataclass
class PipelineResult:
    network: Network  # folded full-precision network
    expansion: ResidualExpansion
    expanded: Network
    ensemble: Optional[EnsembleNetwork]
    report: dict = field(default_factory=dict)

    def report_json(self) -> str:
        return canonical_json(self.report)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if not math.isfinite(value):
            raise InvariantError(f"non-finite number {value} in report")
        return value
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_inputs(path, input_shape) -> np.ndarray:
    xs = np.load(path, allow_pickle=False).astype(np.float64)
    if xs.shape[1:] != tuple(input_shape):
        raise ShapeError(f"calibration inputs {xs.shape} do not match input shape {input_shape}")
    if xs.shape[0] == 0:
        raise ValueError("calibration file holds no inputs")
    return xs


def unit_probes(shape, count: int, seed: int) -> np.ndarray:
    """Gaussian inputs rescaled to unit L2 norm."""
    xs = np.random.default_rng(seed).standard_normal((count,) + tuple(shape))
    norms = np.linalg.norm(xs.reshape(count, -1), axis=1)
    return xs / norms.reshape((count,) + (1,) * len(shape))


def activation_ranges(net: Network, xs: np.ndarray) -> list:
    """Max |value| of the input and of every activation output over ``xs``."""
    ranges = [float(np.abs(xs).max())]
    h = xs
    for layer in net.layers:
        h = apply_layer(layer, h)
        if isinstance(layer, Activation):
            ranges.append(float(np.abs(h).max()))
    return ranges


def _fake_quant(h, peak, bits):
    qmax = 2 ** (bits - 1) - 1
    if peak == 0:
        return h
    scale = peak / qmax
    return np.clip(round_half_away(h / scale), -qmax, qmax) * scale


def forward_fake_quant(net: Network, xs, ranges, bits: int) -> np.ndarray:
    """Forward pass with per-tensor symmetric fake quantization of the input
    and of every activation output."""
    h = _fake_quant(np.asarray(xs, dtype=np.float64), ranges[0], bits)
    slot = 1
    for layer in net.layers:
        h = apply_layer(layer, h)
        if isinstance(layer, Activation):
            h = _fake_quant(h, ranges[slot], bits)
            slot += 1
    return h


def _layer_summaries(net: Network, expansion: ResidualExpansion) -> list:
    out = []
    for i in net.weight_layer_indices():
        layer_exp = expansion[i]
        orders = []
        for k, term in enumerate(layer_exp.terms, start=1):
            scales = term.scales
            orders.append({
                "order": k,
                "scale_min": float(scales.min()),
                "scale_max": float(scales.max()),
                "kept_channels": layer_exp.channels if term.mask is None else term.mask.kept,
            })
        err = bnd.channel_errors(layer_exp, layer_exp.order)
        out.append({
            "index": i,
            "kind": type(net.layers[i]).__name__,
            "shape": list(layer_exp.shape),
            "orders": orders,
            "max_weight_error": float(err.max()),
        })
    return out


def _boundable(net: Network) -> bool:
    try:
        bnd.check_boundable(net)
        return True
    except StructureError:
        return False


def run_pipeline(
    model: Union[Network, str, Path],
    config: RunConfig,
    out_dir: Optional[Union[str, Path]] = None,
    include_timing: bool = False,
) -> PipelineResult:
    source = load_model(model) if isinstance(model, (str, Path)) else model
    try:
        bn_logit_norm = logit_norm_from_batch_norm(source)
    except StructureError:
        bn_logit_norm = None
    net = fold_batch_norm(source)
    calib = (load_inputs(config.calibration_inputs, net.input_shape)
             if config.calibration_inputs else None)

    started = time.perf_counter()
    expansion = expand_network(net, QuantConfig(config.bits), config.order,
                               config.sparsity, config.mask_from_order)
    elapsed = time.perf_counter() - started
    expanded = expanded_network(net, expansion)

    notes = []
    boundable = _boundable(net)
    grouping = None
    selection = None
    if config.grouping == "auto":
        if not boundable:
            raise StructureError("automatic grouping needs relu/identity activations")
        if calib is not None:
            logit_norm, norm_source = logit_norm_from_inputs(expanded, calib), "calibration"
        elif bn_logit_norm is not None:
            logit_norm, norm_source = bn_logit_norm, "batchnorm"
        else:
            probes = unit_probes(net.input_shape, config.probe_inputs, config.seed)
            logit_norm, norm_source = logit_norm_from_inputs(expanded, probes), "unit_probes"
        candidates = (config.candidates if config.candidates is not None
                      else candidate_groupings(config.order))
        grouping = select_grouping(net, expansion, candidates, logit_norm,
                                   config.threshold_ratio, config.final_layer)
        selection = {"logit_norm_estimate": logit_norm, "logit_norm_source": norm_source,
                     "threshold_ratio": config.threshold_ratio,
                     "candidates": [list(Grouping(tuple(c)).sizes) for c in candidates]}
    elif config.grouping is not None:
        grouping = Grouping(tuple(config.grouping))
    ensemble = (build_ensemble(net, expansion, grouping, config.final_layer)
                if grouping is not None else None)

    bound_reports = {}
    if boundable:
        bound_reports["dense"] = bnd.network_bound(net, expansion, "dense")
        last_masked = all(expansion[i].terms[-1].mask is not None
                          for i in net.weight_layer_indices())
        if expansion.gamma < 1 and last_masked and net.weight_layer_indices():
            bound_reports["sparse"] = bnd.network_bound(net, expansion, "sparse")
        bound_reports["main_text"] = bnd.main_text_bound(net, expansion)
        if grouping is not None:
            bound_reports["ensemble"] = bnd.ensemble_bound(net, expansion, grouping,
                                                           config.final_layer)
    else:
        notes.append("bounds skipped: they only cover relu/identity activations")
    for name, rep in bound_reports.items():
        if not rep.U >= 0:
            raise InvariantError(f"{name} bound is negative: {rep.U}")

    costs = bops_network(net, expansion, grouping, config.final_layer)

    empirical = None
    if calib is not None:
        # bounds are stated for unit-norm inputs; larger inputs may exceed them
        input_norm = float(np.linalg.norm(calib.reshape(calib.shape[0], -1), axis=1).max())
        empirical = {"inputs": int(calib.shape[0]), "max_input_norm": input_norm,
                     "expansion_vs_full": logits_max_error(net, expanded, calib)}
        if ensemble is not None:
            empirical["ensemble_vs_full"] = logits_max_error(net, ensemble, calib)
            empirical["ensemble_vs_expansion"] = logits_max_error(expanded, ensemble, calib)
        if config.activation_bits is not None:
            ranges = activation_ranges(net, calib)
            quantized = forward_fake_quant(expanded, calib, ranges, config.activation_bits)
            empirical["with_activation_quantization"] = float(
                np.max(np.abs(net.forward_batch(calib) - quantized)))
    elif config.activation_bits is not None:
        notes.append("activation quantization needs calibration inputs; activations kept full precision")

    report = {
        "report_version": REPORT_VERSION,
        "config": config.echo(),
        "network": {"input_shape": list(net.input_shape),
                    "output_shape": list(net.output_shape),
                    "layers": len(net.layers),
                    "weight_layers": len(net.weight_layer_indices())},
        "layers": _layer_summaries(net, expansion),
        "grouping": None if grouping is None else list(grouping.sizes),
        "grouping_selection": selection,
        "bounds": {name: rep.to_dict() for name, rep in bound_reports.items()},
        "costs": costs.to_dict(),
        "U_empirical": empirical,
        "notes": notes,
    }
    if include_timing:
        report["timing"] = {"quantization_seconds": elapsed}
    result = PipelineResult(net, expansion, expanded, ensemble, report)
    result.report = json.loads(result.report_json())  # normalize types once

    if out_dir is not None:
        out = Path(out_dir)
        save_model(expanded, out / "expanded", dtype="f64")
        if ensemble is not None:
            for m, member in enumerate(ensemble.members, start=1):
                save_model(member, out / f"member{m}", dtype="f64")
        (out / "report.json").write_text(result.report_json())
    return result
