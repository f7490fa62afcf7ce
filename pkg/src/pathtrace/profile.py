"""Offline profiling: build and persist per-class canary paths.

A class path is the bitwise OR of the activation paths of every correctly
predicted training sample of that class. Profiles are tied to the model and
extraction config through a 64-bit fingerprint that detection re-checks, so
offline and online extraction can never silently diverge.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FingerprintMismatchError
from .net import Network, infer
from .paths import ActivationPath, ExtractionConfig, empty_path, extract_path, path_or

CLASSPATH_MAGIC = b"PTCP"
CLASSPATH_VERSION = 1


class UnprofiledClassError(DataError):
    """Detection asked for a class that never appeared correctly predicted."""


@dataclass
class ClassPathStore:
    paths: dict = field(default_factory=dict)  # class id -> ActivationPath
    counts: dict = field(default_factory=dict)  # class id -> contributing samples
    fingerprint: int = 0

    def class_path(self, class_id) -> ActivationPath:
        try:
            return self.paths[class_id]
        except KeyError:
            raise UnprofiledClassError(f"no class path for class {class_id}")

    def classes(self):
        return sorted(self.paths)

    def check_fingerprint(self, net: Network, config: ExtractionConfig):
        expect = config.fingerprint(net)
        if expect != self.fingerprint:
            raise FingerprintMismatchError(
                f"profile fingerprint {self.fingerprint:#018x} does not match "
                f"model/config {expect:#018x}; offline and online extraction must match")


def profile(net: Network, dataset, config: ExtractionConfig) -> ClassPathStore:
    """Aggregate activation paths of correctly predicted samples per class."""
    store = ClassPathStore(fingerprint=config.fingerprint(net))
    n = 0
    for x, label in dataset:
        n += 1
        predicted, acts = infer(net, x)
        if predicted != int(label):
            continue
        p = extract_path(net, x, config, acts=acts)
        if predicted in store.paths:
            store.paths[predicted] = path_or(store.paths[predicted], p)
            store.counts[predicted] += 1
        else:
            store.paths[predicted] = p
            store.counts[predicted] = 1
    if n == 0:
        warnings.warn("profiling an empty dataset produces an empty store")
    return store


def merge_incremental(store: ClassPathStore, net: Network, samples,
                      config: ExtractionConfig) -> ClassPathStore:
    """Fold new samples into an existing store without re-profiling."""
    store.check_fingerprint(net, config)
    update = profile(net, samples, config)
    merged = ClassPathStore(fingerprint=store.fingerprint)
    merged.paths = dict(store.paths)
    merged.counts = dict(store.counts)
    for c, p in update.paths.items():
        if c in merged.paths:
            merged.paths[c] = path_or(merged.paths[c], p)
            merged.counts[c] += update.counts[c]
        else:
            merged.paths[c] = p
            merged.counts[c] = update.counts[c]
    return merged


def saturation_curve(net: Network, dataset, config: ExtractionConfig, class_id):
    """Running class-path popcount as correctly predicted samples accrue."""
    acc = None
    curve = []
    seen = 0
    for x, label in dataset:
        if int(label) != int(class_id):
            continue
        predicted, acts = infer(net, x)
        if predicted != int(label):
            continue
        p = extract_path(net, x, config, acts=acts)
        acc = p if acc is None else path_or(acc, p)
        seen += 1
        curve.append((seen, acc.popcount()))
    if seen < 2:
        raise DataError(f"saturation curve needs >= 2 usable samples of class {class_id}")
    return curve


def interclass_similarity_matrix(store: ClassPathStore):
    """Pairwise S with each class path as the reference, both directions.

    Returns (classes, matrix) with matrix[i][j] = S(P_ci against P_cj).
    """
    classes = store.classes()
    if len(classes) < 2:
        raise DataError("similarity matrix needs >= 2 profiled classes")
    m = np.zeros((len(classes), len(classes)))
    flats = {c: store.paths[c].concat() for c in classes}
    for i, ci in enumerate(classes):
        for j, cj in enumerate(classes):
            a, b = flats[ci], flats[cj]
            na = int(a.sum())
            m[i, j] = 1.0 if na == 0 else int((a & b).sum()) / na
    return classes, m


# ---------------------------------------------------------------------------
# Class-path file format


def save_classpaths(store: ClassPathStore, path):
    out = bytearray()
    out += CLASSPATH_MAGIC
    out += struct.pack("<H", CLASSPATH_VERSION)
    out += struct.pack("<I", len(store.paths))
    for c in store.classes():
        p = store.paths[c]
        out += struct.pack("<II H", int(c), int(store.counts[c]), len(p.masks))
        for mask in p.masks:
            out += struct.pack("<I", len(mask))
            out += np.packbits(mask, bitorder="little").tobytes()
    out += struct.pack("<Q", store.fingerprint)
    with open(path, "wb") as f:
        f.write(out)


def load_classpaths(path, net: Network, config: ExtractionConfig) -> ClassPathStore:
    raw = open(path, "rb").read()
    if raw[:4] != CLASSPATH_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CLASSPATH_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    (n_classes,) = struct.unpack_from("<I", raw, 6)
    pos = 10
    template = empty_path(net, config)
    store = ClassPathStore()
    for _ in range(n_classes):
        cid, count, n_layers = struct.unpack_from("<IIH", raw, pos)
        pos += 10
        if n_layers != len(template.layers):
            raise DataError(f"{path}: class {cid} covers {n_layers} layers, "
                            f"config covers {len(template.layers)}")
        masks = []
        for li in range(n_layers):
            (bits,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            want = len(template.masks[li])
            if bits != want:
                raise DataError(f"{path}: class {cid} layer {li} has {bits} bits, "
                                f"model layer has {want}")
            nbytes = (bits + 7) // 8
            mask = np.unpackbits(np.frombuffer(raw, np.uint8, nbytes, pos),
                                 bitorder="little")[:bits].astype(bool)
            pos += nbytes
            masks.append(mask)
        store.paths[cid] = ActivationPath(template.layers, masks)
        store.counts[cid] = count
    (store.fingerprint,) = struct.unpack_from("<Q", raw, pos)
    store.check_fingerprint(net, config)
    return store
