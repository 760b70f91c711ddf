"""Command-line entry point.

Exit codes: 0 on success, 2 on bad input (including argument errors),
3 when an internal invariant is violated.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .container import load_model
from .errors import ConvergenceError, InvariantError
from .pipeline import RunConfig, canonical_json, run_pipeline

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3


def _grouping(text: str):
    if text == "auto":
        return text
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected sizes like 2,2 or 'auto', got {text!r}")


def _add_run_options(p: argparse.ArgumentParser):
    p.add_argument("model", help="model container directory")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--order", type=int, default=1, help="expansion order K")
    p.add_argument("--sparsity", type=float, default=1.0,
                   help="fraction of output channels kept in masked orders")
    p.add_argument("--mask-from", type=int, default=2, dest="mask_from",
                   help="first order the mask applies to")
    p.add_argument("--grouping", type=_grouping, default=None,
                   help="ensemble cluster sizes, e.g. 2,2, or 'auto'")
    p.add_argument("--threshold-ratio", type=float, default=0.1, dest="threshold_ratio")
    p.add_argument("--final-layer", choices=("shared", "split"), default="shared",
                   dest="final_layer")
    p.add_argument("--activation-bits", type=int, default=None, dest="activation_bits")
    p.add_argument("--calib", default=None, help=".npy file of calibration inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None, help="write the JSON output here instead of stdout")
    p.add_argument("--timing", action="store_true", help="include wall-clock timing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resquant",
                                     description="Residual expansion quantization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="expand a model and write the full report")
    _add_run_options(p)
    p.add_argument("--out", default=None, help="directory for the expanded containers")
    sub_help = {
        "bound": "print the certified error bounds",
        "bops": "print the bit-operation cost report",
        "eval": "measure the logit error on calibration inputs",
    }
    for name, text in sub_help.items():
        _add_run_options(sub.add_parser(name, help=text))

    p = sub.add_parser("inspect", help="summarize a model container")
    p.add_argument("model")
    p.add_argument("--report", default=None)
    return parser


def _config(args) -> RunConfig:
    return RunConfig(
        bits=args.bits, order=args.order, sparsity=args.sparsity,
        mask_from_order=args.mask_from, grouping=args.grouping,
        threshold_ratio=args.threshold_ratio, final_layer=args.final_layer,
        activation_bits=args.activation_bits, seed=args.seed,
        calibration_inputs=args.calib,
    )


def inspect_model(path) -> dict:
    net = load_model(path)
    layers = []
    for i, layer in enumerate(net.layers):
        entry = {"index": i, "kind": type(layer).__name__,
                 "output_shape": list(net.shapes[i])}
        weight = getattr(layer, "weight", None)
        if weight is not None:
            entry["weight_shape"] = list(weight.shape)
            entry["params"] = int(weight.size + (0 if layer.bias is None else layer.bias.size))
        if hasattr(layer, "kind") and isinstance(layer.kind, str):
            entry["activation"] = layer.kind
        layers.append(entry)
    return {"input_shape": list(net.input_shape), "output_shape": list(net.output_shape),
            "layers": layers, "params": sum(e.get("params", 0) for e in layers)}


def _emit(doc, report_path):
    text = canonical_json(doc)
    if report_path:
        Path(report_path).write_text(text)
    else:
        sys.stdout.write(text)


def _dispatch(args):
    if args.command == "inspect":
        return inspect_model(args.model)
    if args.command == "eval" and not args.calib:
        raise ValueError("eval needs --calib")
    out = getattr(args, "out", None)
    result = run_pipeline(args.model, _config(args), out_dir=out, include_timing=args.timing)
    report = result.report
    if args.command == "quantize":
        return report
    keep = {"bound": ("config", "grouping", "bounds", "notes"),
            "bops": ("config", "grouping", "costs"),
            "eval": ("config", "grouping", "U_empirical", "bounds")}[args.command]
    return {key: report[key] for key in keep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = _dispatch(args)
        _emit(doc, args.report)
    except InvariantError as exc:
        print(f"resquant: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ValueError, TypeError, OSError, ConvergenceError, np.linalg.LinAlgError) as exc:
        print(f"resquant: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
