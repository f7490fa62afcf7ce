"""Model archive and raw-tensor dataset I/O.

A model archive is a directory holding `model.json` (layer kinds, shapes,
strides, padding, class count) and `weights.bin` (magic `PTWT`, u16
version, then all weights/biases concatenated in manifest order as
little-endian float32). Datasets reuse the same blob container for each
tensor, with shapes and labels kept in a JSON manifest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .net import Conv2d, Dense, Flatten, MaxPool2d, Network, Relu

WEIGHTS_MAGIC = b"PTWT"
FORMAT_VERSION = 1

MANIFEST_NAME = "model.json"
WEIGHTS_NAME = "weights.bin"


def _layer_entry(layer):
    if layer.kind == "dense":
        return {"kind": "dense", "in": layer.weight.shape[0], "out": layer.weight.shape[1]}
    if layer.kind == "conv":
        oc, ic, kh, kw = layer.weight.shape
        return {"kind": "conv", "out_channels": oc, "in_channels": ic,
                "kernel": [kh, kw], "stride": layer.stride, "padding": layer.padding}
    if layer.kind == "relu":
        return {"kind": "relu"}
    if layer.kind == "maxpool":
        return {"kind": "maxpool", "size": layer.size, "stride": layer.stride}
    if layer.kind == "flatten":
        return {"kind": "flatten"}
    raise DataError(f"cannot serialize layer kind {layer.kind}")


def _layer_from_entry(e, params):
    kind = e["kind"]
    if kind == "dense":
        w = params.take(e["in"] * e["out"]).reshape(e["in"], e["out"])
        b = params.take(e["out"])
        return Dense(w, b)
    if kind == "conv":
        oc, ic = e["out_channels"], e["in_channels"]
        kh, kw = e["kernel"]
        w = params.take(oc * ic * kh * kw).reshape(oc, ic, kh, kw)
        b = params.take(oc)
        return Conv2d(w, b, stride=e["stride"], padding=e["padding"])
    if kind == "relu":
        return Relu()
    if kind == "maxpool":
        return MaxPool2d(size=e["size"], stride=e["stride"])
    if kind == "flatten":
        return Flatten()
    raise DataError(f"unknown layer kind {kind!r} in manifest")


class _ParamReader:
    def __init__(self, flat):
        self.flat = flat
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.flat):
            raise DataError("weights file shorter than manifest requires")
        out = self.flat[self.pos : self.pos + n]
        self.pos += n
        return out.copy()


def write_tensor_blob(path, array):
    data = np.ascontiguousarray(array, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(data)


def read_tensor_blob(path, shape=None):
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    flat = np.frombuffer(raw[6:], dtype="<f4").astype(np.float32)
    if shape is not None:
        n = int(np.prod(shape))
        if len(flat) != n:
            raise DataError(f"{path}: {len(flat)} values, shape {shape} needs {n}")
        return flat.reshape(shape)
    return flat


def save_model(net: Network, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "class_count": net.class_count,
        "input_shape": list(net.input_shape),
        "layers": [_layer_entry(l) for l in net.layers],
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n",
                                           encoding="utf-8")
    flat = np.concatenate([np.ravel(a) for a in net.param_arrays()])
    write_tensor_blob(directory / WEIGHTS_NAME, flat)
    return directory


def load_model(directory) -> Network:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{directory}: no {MANIFEST_NAME}")
    except json.JSONDecodeError as e:
        raise DataError(f"{directory}/{MANIFEST_NAME}: invalid JSON ({e})")
    flat = read_tensor_blob(directory / WEIGHTS_NAME)
    reader = _ParamReader(flat)
    layers = [_layer_from_entry(e, reader) for e in manifest["layers"]]
    if reader.pos != len(flat):
        raise DataError(f"{directory}: {len(flat) - reader.pos} unused weight values")
    return Network(layers, manifest["class_count"], tuple(manifest["input_shape"]))


# ---------------------------------------------------------------------------
# Datasets: directory of tensor blobs + JSON manifest

DATASET_MANIFEST = "dataset.json"


def save_dataset(directory, inputs, labels, shape, extra=None):
    """Write inputs as blobs and a manifest with labels (and optional extras)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for i, (x, y) in enumerate(zip(inputs, labels)):
        name = f"sample_{i:05d}.ptt"
        write_tensor_blob(directory / name, x)
        item = {"file": name, "label": int(y), "shape": list(shape)}
        if extra is not None:
            item.update(extra[i])
        items.append(item)
    manifest = {"format_version": FORMAT_VERSION, "items": items}
    (directory / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n",
                                              encoding="utf-8")
    return directory


def load_dataset(directory):
    """Returns (inputs, labels, items) where items are the manifest entries."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / DATASET_MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{directory}: no {DATASET_MANIFEST}")
    inputs, labels = [], []
    for item in manifest["items"]:
        inputs.append(read_tensor_blob(directory / item["file"], tuple(item["shape"])))
        labels.append(int(item["label"]))
    return inputs, labels, manifest["items"]
