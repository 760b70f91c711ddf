"""On-disk model container: a JSON manifest plus one raw blob per tensor.

Layout of a container directory::

    manifest.json
    <tensor-name>.bin      little-endian, row-major

``manifest.json`` (format_version 1)::

    {
      "format_version": 1,
      "input_shape": [784],
      "layers": [
        {"kind": "dense", "weight": "layer0.weight", "bias": "layer0.bias"},
        {"kind": "activation", "activation": "relu"},
        {"kind": "conv2d", "weight": "...", "bias": null, "stride": 1, "padding": "same"},
        {"kind": "batchnorm", "gamma": "...", "beta": "...", "mean": "...", "var": "...",
         "eps": 1e-05}
      ],
      "tensors": {"layer0.weight": {"shape": [10, 784], "dtype": "f32",
                                    "file": "layer0.weight.bin"}, ...}
    }

``dtype`` is ``f32`` (4 bytes per value, the default) or ``f64``. Emitted
expansions use ``f64`` so that re-loading reproduces them exactly.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .errors import (
    BlobShapeError,
    ContainerError,
    FormatVersionError,
    MissingBlobError,
    UnknownLayerError,
)
from .model import Activation, BatchNorm, Conv2D, Dense, Network

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}

PathLike = Union[str, Path]


def _read_tensor(root: Path, tensors: dict, name: str) -> np.ndarray:
    if name not in tensors:
        raise MissingBlobError(f"manifest references unknown tensor {name!r}")
    entry = tensors[name]
    try:
        shape = [int(d) for d in entry["shape"]]
        dtype = DTYPES[entry.get("dtype", "f32")]
        path = root / entry["file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"tensor {name!r}: malformed entry ({exc})") from None
    if not path.is_file():
        raise MissingBlobError(f"tensor {name!r}: blob {entry['file']!r} not found")
    raw = path.read_bytes()
    expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise BlobShapeError(
            f"tensor {name!r}: blob has {len(raw)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(shape)


def load_model(path: PathLike) -> Network:
    root = Path(path)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise ContainerError(f"{manifest_path} not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{manifest_path}: invalid JSON ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
    tensors = manifest.get("tensors", {})

    def tensor(name):
        return None if name is None else _read_tensor(root, tensors, name)

    layers = []
    for i, entry in enumerate(manifest.get("layers", [])):
        kind = entry.get("kind")
        if kind == "dense":
            layers.append(Dense(tensor(entry["weight"]), tensor(entry.get("bias"))))
        elif kind == "conv2d":
            layers.append(Conv2D(tensor(entry["weight"]), tensor(entry.get("bias")),
                                 stride=int(entry.get("stride", 1)),
                                 padding=entry.get("padding", "valid")))
        elif kind == "batchnorm":
            layers.append(BatchNorm(tensor(entry["gamma"]), tensor(entry["beta"]),
                                    tensor(entry["mean"]), tensor(entry["var"]),
                                    eps=float(entry.get("eps", 1e-5))))
        elif kind == "activation":
            layers.append(Activation(entry.get("activation", "relu")))
        else:
            raise UnknownLayerError(f"layer {i}: unknown kind {kind!r}")
    return Network(tuple(layers), tuple(manifest["input_shape"]))


def save_model(net: Network, path: PathLike, dtype: str = "f32") -> Path:
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors, layers = {}, []

    def put(name, array):
        if array is None:
            return None
        array = np.ascontiguousarray(array, dtype=DTYPES[dtype])
        (root / f"{name}.bin").write_bytes(array.tobytes())
        tensors[name] = {"shape": list(array.shape), "dtype": dtype, "file": f"{name}.bin"}
        return name

    for i, layer in enumerate(net.layers):
        prefix = f"layer{i}"
        if isinstance(layer, Dense):
            layers.append({"kind": "dense", "weight": put(f"{prefix}.weight", layer.weight),
                           "bias": put(f"{prefix}.bias", layer.bias)})
        elif isinstance(layer, Conv2D):
            layers.append({"kind": "conv2d", "weight": put(f"{prefix}.weight", layer.weight),
                           "bias": put(f"{prefix}.bias", layer.bias),
                           "stride": int(layer.stride), "padding": layer.padding})
        elif isinstance(layer, BatchNorm):
            entry = {"kind": "batchnorm", "eps": float(layer.eps)}
            for field in ("gamma", "beta", "mean", "var"):
                entry[field] = put(f"{prefix}.{field}", getattr(layer, field))
            layers.append(entry)
        elif isinstance(layer, Activation):
            layers.append({"kind": "activation", "activation": layer.kind})
        else:
            raise UnknownLayerError(f"layer {i}: cannot serialize {type(layer).__name__}")
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "layers": layers,
        "tensors": tensors,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return root
