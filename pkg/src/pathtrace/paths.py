"""Important-neuron extraction and activation-path construction.

A path is one bitmask per covered weighted layer, over that layer's input
feature map. Backward extraction seeds at the predicted-class neuron and
walks toward the input, ranking partial sums; forward extraction thresholds
feature-map values layer by layer as inference produces them. The two
directions cannot be mixed within one network.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, UnsupportedCombinationError
from .net import Network, PartialSumRecord, infer, psums_for_neuron

BACKWARD = "backward"
FORWARD = "forward"

CUMULATIVE = "cumulative"
ABSOLUTE = "absolute"
SKIP = "skip"

DEFAULT_THETA = 0.5


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class ThresholdSpec:
    kind: str  # cumulative | absolute | skip
    value: float = 0.0

    def __post_init__(self):
        if self.kind == CUMULATIVE:
            if not (0.0 < self.value <= 1.0):
                raise ConfigError(f"cumulative threshold must be in (0,1], got {self.value}")
        elif self.kind == ABSOLUTE:
            if not np.isfinite(self.value):
                raise ConfigError("absolute threshold must be finite")
        elif self.kind != SKIP:
            raise ConfigError(f"unknown threshold kind {self.kind!r}")


def cumulative(theta):
    return ThresholdSpec(CUMULATIVE, float(theta))


def absolute(phi):
    return ThresholdSpec(ABSOLUTE, float(phi))


def skip():
    return ThresholdSpec(SKIP)


@dataclass
class ExtractionConfig:
    """Direction, per-weighted-layer threshold table, and boundary layer.

    Layers are addressed by weighted-layer ordinal (0 = first dense/conv
    layer). `boundary` is the first covered ordinal: the termination layer
    under backward extraction, the start layer under forward extraction.
    Ordinals below it are not extracted at all. Skipped layers inside the
    covered range emit all-zero masks; under backward extraction they still
    propagate importance using `skip_propagation`.
    """

    direction: str = BACKWARD
    thresholds: dict = field(default_factory=dict)  # ordinal -> ThresholdSpec
    default: ThresholdSpec = ThresholdSpec(CUMULATIVE, DEFAULT_THETA)
    boundary: int = 0
    skip_propagation: ThresholdSpec = ThresholdSpec(CUMULATIVE, DEFAULT_THETA)

    def __post_init__(self):
        if self.direction not in (BACKWARD, FORWARD):
            raise ConfigError(f"direction must be backward or forward, got {self.direction!r}")
        if self.boundary < 0:
            raise ConfigError("boundary layer must be >= 0")
        if self.direction == FORWARD:
            for spec in list(self.thresholds.values()) + [self.default]:
                if spec.kind == CUMULATIVE:
                    raise UnsupportedCombinationError(
                        "forward extraction does not support cumulative thresholds")

    def spec_for(self, ordinal):
        return self.thresholds.get(ordinal, self.default)

    def covered_ordinals(self, n_weighted):
        if self.boundary >= n_weighted:
            raise ConfigError(f"boundary {self.boundary} beyond last weighted layer "
                              f"({n_weighted - 1})")
        return list(range(self.boundary, n_weighted))

    def canonical_text(self):
        lines = [f"direction {self.direction}", f"boundary {self.boundary}"]
        lines.append(f"default {self.default.kind} {self.default.value!r}")
        lines.append(f"skip-propagation {self.skip_propagation.kind} "
                     f"{self.skip_propagation.value!r}")
        for ordinal in sorted(self.thresholds):
            s = self.thresholds[ordinal]
            lines.append(f"layer {ordinal} {s.kind} {s.value!r}")
        return "\n".join(lines) + "\n"

    def fingerprint(self, net: Network) -> int:
        """64-bit profile/detect compatibility fingerprint."""
        h = hashlib.sha256()
        h.update(net.weights_digest().encode())
        h.update(self.canonical_text().encode())
        return int.from_bytes(h.digest()[:8], "big")

    @classmethod
    def from_text(cls, text):
        direction = BACKWARD
        boundary = 0
        default = ThresholdSpec(CUMULATIVE, DEFAULT_THETA)
        skip_prop = ThresholdSpec(CUMULATIVE, DEFAULT_THETA)
        thresholds = {}

        def parse_spec(tokens, where):
            kind = tokens[0]
            if kind == SKIP:
                return ThresholdSpec(SKIP)
            if kind in (CUMULATIVE, ABSOLUTE):
                if len(tokens) < 2:
                    raise ConfigError(f"{where}: {kind} needs a value")
                return ThresholdSpec(kind, float(tokens[1]))
            raise ConfigError(f"{where}: unknown threshold kind {kind!r}")

        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.replace("=", " ").split()
            key = tokens[0]
            where = f"config line {lineno}"
            if key == "direction":
                direction = tokens[1]
            elif key == "boundary":
                boundary = int(tokens[1])
            elif key == "default":
                default = parse_spec(tokens[1:], where)
            elif key == "skip-propagation":
                skip_prop = parse_spec(tokens[1:], where)
            elif key == "layer":
                thresholds[int(tokens[1])] = parse_spec(tokens[2:], where)
            else:
                raise ConfigError(f"{where}: unknown directive {key!r}")
        return cls(direction=direction, thresholds=thresholds, default=default,
                   boundary=boundary, skip_propagation=skip_prop)


# ---------------------------------------------------------------------------
# Paths


@dataclass
class ImportantNeuronSet:
    layer_index: int
    offsets: np.ndarray  # sorted unique int64 flat offsets into the input map

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)


@dataclass
class ActivationPath:
    """Per-layer importance bitmasks over input feature maps.

    `layers` holds the raw indices of the covered weighted layers
    (ascending, a contiguous range of weighted layers ending at the last
    one); masks[i] is a bool vector with one bit per input element of
    layers[i].
    """

    layers: tuple
    masks: list

    def __post_init__(self):
        self.layers = tuple(int(i) for i in self.layers)
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        if len(self.layers) != len(self.masks):
            raise ShapeError("one mask per covered layer required")

    def popcount(self):
        return int(sum(int(m.sum()) for m in self.masks))

    def layer_popcounts(self):
        return [int(m.sum()) for m in self.masks]

    def mask_for(self, layer_index):
        return self.masks[self.layers.index(layer_index)]

    def concat(self):
        if not self.masks:
            return np.zeros(0, dtype=bool)
        return np.concatenate(self.masks)

    def same_coverage(self, other: "ActivationPath"):
        return (self.layers == other.layers
                and all(a.shape == b.shape for a, b in zip(self.masks, other.masks)))

    def __eq__(self, other):
        if not isinstance(other, ActivationPath):
            return NotImplemented
        return self.same_coverage(other) and all(
            np.array_equal(a, b) for a, b in zip(self.masks, other.masks))

    def copy(self):
        return ActivationPath(self.layers, [m.copy() for m in self.masks])


def empty_path(net: Network, config: ExtractionConfig) -> ActivationPath:
    weighted = net.weighted_layers()
    covered = config.covered_ordinals(len(weighted))
    layers = [weighted[o] for o in covered]
    return ActivationPath(layers, [np.zeros(net.layer_input_size(i), dtype=bool)
                                   for i in layers])


def path_or(a: ActivationPath, b: ActivationPath) -> ActivationPath:
    if not a.same_coverage(b):
        raise ShapeError("paths cover different layers or lengths")
    return ActivationPath(a.layers, [x | y for x, y in zip(a.masks, b.masks)])


# ---------------------------------------------------------------------------
# Per-neuron selection


def select_cumulative(ids, values, theta, target):
    """Minimal descending-prefix of contributions reaching theta * target.

    Ties between equal contributions break toward the lower offset.
    Non-positive targets select nothing; if the positive contributions
    cannot reach the threshold, all of them are selected.
    """
    if target <= 0.0 or len(ids) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((ids, -values))
    vals = values[order]
    positive = int(np.searchsorted(-vals, 0.0, side="left"))  # count of vals > 0
    if positive == 0:
        return np.zeros(0, dtype=np.int64)
    run = np.cumsum(vals[:positive], dtype=np.float64)
    need = float(theta) * float(target)
    hit = np.nonzero(run >= need)[0]
    k = int(hit[0]) + 1 if len(hit) else positive
    return np.sort(ids[order[:k]])


def select_absolute(ids, values, phi):
    """Offsets whose contribution strictly exceeds phi."""
    return np.sort(ids[values > phi])


def extract_backward_cumulative(psums: PartialSumRecord, theta, target_value=None):
    """Important inputs of one output neuron under a cumulative threshold."""
    if not (0.0 < theta <= 1.0):
        raise ConfigError(f"theta must be in (0,1], got {theta}")
    target = psums.total() if target_value is None else float(target_value)
    offs = select_cumulative(psums.input_ids, psums.values, theta, target)
    return ImportantNeuronSet(psums.layer_index, offs)


def extract_backward_absolute(psums: PartialSumRecord, phi):
    """Important inputs of one output neuron under an absolute threshold."""
    if not np.isfinite(phi):
        raise ConfigError("phi must be finite")
    return ImportantNeuronSet(psums.layer_index,
                              select_absolute(psums.input_ids, psums.values, phi))


# ---------------------------------------------------------------------------
# Importance propagation through non-weighted layers


def map_back_through(net: Network, acts, layer_index, ids):
    """Map importance over layer `layer_index`'s output back onto its input."""
    layer = net.layers[layer_index]
    if layer.kind in ("relu", "flatten"):
        return ids
    if layer.kind == "maxpool":
        x = acts[layer_index]
        return np.unique(np.asarray(
            [layer.argmax_source(x, int(i)) for i in ids], dtype=np.int64))
    raise ConfigError(f"cannot map importance through weighted layer {layer_index}")


def _seed_worklist(net: Network, acts, predicted):
    """Important outputs of the last weighted layer: the predicted-class neuron
    mapped back through any trailing non-weighted layers."""
    last_w = net.weighted_layers()[-1]
    ids = np.asarray([predicted], dtype=np.int64)
    for j in range(len(net.layers) - 1, last_w, -1):
        ids = map_back_through(net, acts, j, ids)
    return ids


def _selection_for_layer(net: Network, acts, layer_index, worklist, spec: ThresholdSpec):
    """Union of per-output-neuron selections over one weighted layer."""
    layer = net.layers[layer_index]
    if layer.kind == "conv":
        return _conv_layer_selection(net, acts, layer_index, worklist, spec)
    picked = []
    x = acts[layer_index]
    for neuron in worklist:
        w = layer.weight[:, int(neuron)]
        contrib = (x * w).astype(np.float32, copy=False)
        nz = np.nonzero(contrib)[0]
        ids, vals = nz.astype(np.int64), contrib[nz]
        picked.append(_apply_spec(ids, vals, spec,
                                  target=float(acts[layer_index + 1][int(neuron)])))
    return _union(picked)


def _conv_layer_selection(net: Network, acts, layer_index, worklist, spec):
    from .net import im2col

    layer = net.layers[layer_index]
    x = acts[layer_index]
    out = acts[layer_index + 1]
    oc, oh, ow = out.shape
    kh, kw = layer.weight.shape[2], layer.weight.shape[3]
    cols, _ = im2col(x, kh, kw, layer.stride, layer.padding)
    id_cols = _conv_input_ids(x.shape, kh, kw, layer.stride, layer.padding, oh, ow)
    wflat = layer.weight.reshape(oc, -1)
    out_flat = out.reshape(-1)
    picked = []
    for neuron in worklist:
        neuron = int(neuron)
        ci, pos = divmod(neuron, oh * ow)
        contrib = (cols[:, pos] * wflat[ci]).astype(np.float32, copy=False)
        ids = id_cols[:, pos]
        ok = (ids >= 0) & (contrib != 0)
        picked.append(_apply_spec(ids[ok], contrib[ok], spec, target=float(out_flat[neuron])))
    return _union(picked)


def _conv_input_ids(in_shape, kh, kw, stride, padding, oh, ow):
    """Flat input ids per im2col cell; -1 marks padding."""
    c, h, w = in_shape
    ids = np.full((c * kh * kw, oh * ow), -1, dtype=np.int64)
    row = 0
    oy = np.arange(oh)[:, None] * stride
    ox = np.arange(ow)[None, :] * stride
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                iy = oy + ky - padding
                ix = ox + kx - padding
                valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
                flat = ((ci * h + iy) * w + ix)
                ids[row] = np.where(valid, flat, -1).reshape(-1)
                row += 1
    return ids


def _apply_spec(ids, vals, spec: ThresholdSpec, target):
    if spec.kind == CUMULATIVE:
        return select_cumulative(ids, vals, spec.value, target)
    if spec.kind == ABSOLUTE:
        return select_absolute(ids, vals, spec.value)
    raise ConfigError(f"no selection rule for {spec.kind}")


def _union(picked):
    if not picked:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(picked))


# ---------------------------------------------------------------------------
# Whole-path extraction


def extract_path_backward(net: Network, x, config: ExtractionConfig,
                          acts=None, predicted=None) -> ActivationPath:
    """Backward path: seed at the predicted class, walk to the boundary layer."""
    if config.direction != BACKWARD:
        raise ConfigError("extract_path_backward needs a backward config")
    if acts is None:
        predicted, acts = infer(net, x)
    elif predicted is None:
        predicted = int(np.argmax(acts[-1]))
    weighted = net.weighted_layers()
    covered = config.covered_ordinals(len(weighted))
    path = empty_path(net, config)
    worklist = _seed_worklist(net, acts, predicted)
    for ordinal in range(len(weighted) - 1, covered[0] - 1, -1):
        li = weighted[ordinal]
        spec = config.spec_for(ordinal)
        active = spec if spec.kind != SKIP else config.skip_propagation
        selected = _selection_for_layer(net, acts, li, worklist, active)
        if spec.kind != SKIP:
            path.mask_for(li)[selected] = True
        if ordinal == covered[0]:
            break
        # selected input ids become the important outputs of the previous
        # weighted layer once mapped through relu/pool/flatten in between
        ids = selected
        for j in range(li - 1, weighted[ordinal - 1], -1):
            ids = map_back_through(net, acts, j, ids)
        worklist = ids
    return path


def forward_layer_mask(net: Network, acts, layer_index, phi):
    """Importance bits for one weighted layer's input feature map."""
    x = acts[layer_index]
    return (x.reshape(-1) > phi)


def extract_path_forward(net: Network, activations, config: ExtractionConfig) -> ActivationPath:
    """Forward path: threshold each covered layer's input feature map.

    Only activations up to each covered layer are touched, so the path can
    be built incrementally while inference is still running deeper layers.
    """
    if config.direction != FORWARD:
        raise ConfigError("extract_path_forward needs a forward config")
    weighted = net.weighted_layers()
    covered = config.covered_ordinals(len(weighted))
    path = empty_path(net, config)
    for ordinal in covered:
        li = weighted[ordinal]
        if len(activations) <= li:
            raise ShapeError(f"activations for layer {li} not available yet")
        spec = config.spec_for(ordinal)
        if spec.kind == SKIP:
            continue
        mask = forward_layer_mask(net, activations, li, spec.value)
        np.copyto(path.mask_for(li), mask)
    return path


def extract_path(net: Network, x, config: ExtractionConfig, acts=None) -> ActivationPath:
    """Direction dispatch used by the profiler and detector."""
    if config.direction == BACKWARD:
        return extract_path_backward(net, x, config, acts=acts)
    if acts is None:
        _, acts = infer(net, x)
    return extract_path_forward(net, acts, config)
