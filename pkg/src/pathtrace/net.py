"""Minimal layered network core: inference, partial-sum capture, gradients.

Feature maps are float32 numpy arrays. Conv/pool tensors use (C, H, W)
layout; neuron ids are flat C-order offsets into a layer's feature map.
The output of a dense/conv layer is its pre-activation (ReLU is a layer
of its own), which is what partial-sum extraction ranks against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

F32 = np.float32


# ---------------------------------------------------------------------------
# Layers


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    kind = "dense"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=F32)
        self.bias = np.asarray(self.bias, dtype=F32)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError("dense layer needs weight (in,out) and bias (out,)")

    def out_shape(self, in_shape):
        if in_shape != (self.weight.shape[0],):
            raise ShapeError(f"dense expects {(self.weight.shape[0],)}, got {in_shape}")
        return (self.weight.shape[1],)

    def forward(self, x):
        return x @ self.weight + self.bias


@dataclass
class Conv2d:
    weight: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: int = 0  # zero padding

    kind = "conv"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=F32)
        self.bias = np.asarray(self.bias, dtype=F32)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigError("conv layer needs weight (oc,ic,kh,kw) and bias (oc,)")
        if self.stride < 1:
            raise ConfigError("conv stride must be >= 1")
        if self.padding < 0:
            raise ConfigError("conv padding must be >= 0")

    def out_shape(self, in_shape):
        oc, ic, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != ic:
            raise ShapeError(f"conv expects ({ic},H,W), got {in_shape}")
        h = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"conv kernel does not fit input {in_shape}")
        return (oc, h, w)

    def forward(self, x):
        cols, _ = im2col(x, self.weight.shape[2], self.weight.shape[3], self.stride, self.padding)
        oc = self.weight.shape[0]
        out = self.weight.reshape(oc, -1) @ cols + self.bias[:, None]
        oh, ow = self.out_shape(x.shape)[1:]
        return out.reshape(oc, oh, ow).astype(F32, copy=False)


@dataclass
class Relu:
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, F32(0.0))


@dataclass
class MaxPool2d:
    size: int = 2
    stride: int = 0  # 0 means same as size

    kind = "maxpool"

    def __post_init__(self):
        if self.stride == 0:
            self.stride = self.size
        if self.size < 1 or self.stride < 1:
            raise ConfigError("pool size/stride must be >= 1")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool expects (C,H,W), got {in_shape}")
        c, h, w = in_shape
        oh = (h - self.size) // self.stride + 1
        ow = (w - self.size) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool window does not fit input {in_shape}")
        return (c, oh, ow)

    def forward(self, x):
        return self._windows(x).max(axis=(3, 4))

    def _windows(self, x):
        c, oh, ow = self.out_shape(x.shape)
        s = self.stride
        k = self.size
        # gather (c, oh, ow, k, k) windows
        strides = (x.strides[0], s * x.strides[1], s * x.strides[2], x.strides[1], x.strides[2])
        return np.lib.stride_tricks.as_strided(x, (c, oh, ow, k, k), strides)

    def argmax_source(self, x, out_flat_id):
        """Flat input offset of the max element feeding output neuron out_flat_id."""
        c, oh, ow = self.out_shape(x.shape)
        ci, rest = divmod(out_flat_id, oh * ow)
        oy, ox = divmod(rest, ow)
        win = x[ci, oy * self.stride : oy * self.stride + self.size,
                   ox * self.stride : ox * self.stride + self.size]
        ky, kx = divmod(int(np.argmax(win)), win.shape[1])
        iy, ix = oy * self.stride + ky, ox * self.stride + kx
        return (ci * x.shape[1] + iy) * x.shape[2] + ix


@dataclass
class Flatten:
    kind = "flatten"

    def out_shape(self, in_shape):
        n = 1
        for d in in_shape:
            n *= d
        return (n,)

    def forward(self, x):
        return x.reshape(-1)


WEIGHTED_KINDS = ("dense", "conv")


# ---------------------------------------------------------------------------
# Network


@dataclass
class Network:
    layers: list
    class_count: int
    input_shape: tuple = ()
    shapes: list = field(default_factory=list, repr=False)  # shapes[i] = input of layer i

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        if not any(l.kind in WEIGHTED_KINDS for l in self.layers):
            raise ConfigError("network needs at least one weighted layer")
        if not self.input_shape:
            raise ConfigError("network needs an input shape")
        self.input_shape = tuple(self.input_shape)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        if shapes[-1] != (self.class_count,):
            raise ConfigError(
                f"final layer produces {shapes[-1]}, expected ({self.class_count},)")
        self.shapes = shapes

    def weighted_layers(self):
        """Indices of dense/conv layers, in network order."""
        return [i for i, l in enumerate(self.layers) if l.kind in WEIGHTED_KINDS]

    def layer_input_size(self, i):
        n = 1
        for d in self.shapes[i]:
            n *= d
        return n

    def layer_output_size(self, i):
        n = 1
        for d in self.shapes[i + 1]:
            n *= d
        return n

    def param_arrays(self):
        out = []
        for i in self.weighted_layers():
            out.append(self.layers[i].weight)
            out.append(self.layers[i].bias)
        return out

    def weights_digest(self):
        import hashlib

        h = hashlib.sha256()
        for a in self.param_arrays():
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise ShapeError(f"{what} contains NaN/Inf")


def infer(net: Network, x: np.ndarray):
    """Run inference. Returns (predicted class, activations).

    activations[0] is the input; activations[i+1] is the output of layer i,
    so activations[i] is always the input feature map of layer i.
    """
    x = np.asarray(x, dtype=F32)
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} != network input {net.input_shape}")
    check_finite(x, "input")
    acts = [x]
    for layer in net.layers:
        x = layer.forward(x)
        acts.append(x)
    check_finite(acts[-1], "logits")
    return int(np.argmax(acts[-1])), acts


# ---------------------------------------------------------------------------
# Partial sums


@dataclass
class PartialSumRecord:
    """Per-input-neuron contributions to one output neuron's pre-activation.

    Zero contributions (zero weight or zero activation, including padding)
    carry no importance signal and are omitted. The bias is kept separate;
    it has no input-neuron id and is never selectable as important.
    """

    layer_index: int
    neuron: int
    input_ids: np.ndarray  # int64, flat offsets into the layer's input map
    values: np.ndarray  # float32 contributions, same length
    bias: float

    def total(self):
        return float(self.values.sum(dtype=np.float64) + self.bias)


def _dense_psums(layer: Dense, x, neuron):
    contrib = (x * layer.weight[:, neuron]).astype(F32, copy=False)
    ids = np.nonzero(contrib)[0]
    return ids.astype(np.int64), contrib[ids], float(layer.bias[neuron])


def _conv_psums(layer: Conv2d, x, neuron, out_shape):
    oc, oh, ow = out_shape
    ci, rest = divmod(neuron, oh * ow)
    oy, ox = divmod(rest, ow)
    _, ic, kh, kw = layer.weight.shape
    h, w = x.shape[1], x.shape[2]
    ids = []
    vals = []
    y0 = oy * layer.stride - layer.padding
    x0 = ox * layer.stride - layer.padding
    for c in range(ic):
        for ky in range(kh):
            iy = y0 + ky
            if iy < 0 or iy >= h:
                continue
            for kx in range(kw):
                ix = x0 + kx
                if ix < 0 or ix >= w:
                    continue
                v = F32(x[c, iy, ix] * layer.weight[ci, c, ky, kx])
                if v != 0:
                    ids.append((c * h + iy) * w + ix)
                    vals.append(v)
    return (np.asarray(ids, dtype=np.int64),
            np.asarray(vals, dtype=F32),
            float(layer.bias[ci]))


def psums_for_neuron(net: Network, acts, layer_index, neuron) -> PartialSumRecord:
    """Contributions of input feature-map elements to one output neuron."""
    layer = net.layers[layer_index]
    if layer.kind not in WEIGHTED_KINDS:
        raise ConfigError(f"layer {layer_index} ({layer.kind}) has no partial sums")
    nout = net.layer_output_size(layer_index)
    if not (0 <= neuron < nout):
        raise ShapeError(f"neuron {neuron} out of range for layer {layer_index} ({nout})")
    x = acts[layer_index]
    if layer.kind == "dense":
        ids, vals, bias = _dense_psums(layer, x, neuron)
    else:
        ids, vals, bias = _conv_psums(layer, x, neuron, net.shapes[layer_index + 1])
    return PartialSumRecord(layer_index, neuron, ids, vals, bias)


def infer_with_psums(net: Network, x, layers):
    """Inference that also records partial sums for the requested weighted layers.

    Returns (class, activations, {layer_index: [PartialSumRecord per output neuron]}).
    """
    weighted = set(net.weighted_layers())
    for i in layers:
        if i not in weighted:
            raise ConfigError(f"layer {i} is not a weighted layer; no partial sums")
    cls, acts = infer(net, x)
    records = {}
    for i in sorted(layers):
        records[i] = [psums_for_neuron(net, acts, i, n)
                      for n in range(net.layer_output_size(i))]
    return cls, acts, records


def recompute_psums(net: Network, acts, layer_index, neuron) -> PartialSumRecord:
    """Recompute the record for a single output neuron from cached activations.

    Bitwise identical to the record infer_with_psums would produce.
    """
    return psums_for_neuron(net, acts, layer_index, neuron)


def im2col(x, kh, kw, stride, padding):
    """Unfold (C,H,W) into (C*kh*kw, OH*OW) columns plus the padded input."""
    c, h, w = x.shape
    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=F32)
        xp[:, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = np.empty((c * kh * kw, oh * ow), dtype=F32)
    idx = 0
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                patch = xp[ci, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride]
                cols[idx] = patch.reshape(-1)
                idx += 1
    return cols, xp


# ---------------------------------------------------------------------------
# Gradients


@dataclass
class CrossEntropyLoss:
    """Softmax cross-entropy against an integer label."""

    label: int


@dataclass
class ActivationMatchLoss:
    """Sum of squared L2 distances between selected activations and targets.

    targets maps an activation index (into the infer() activations list)
    to the target array for that activation.
    """

    targets: dict


def _softmax(z):
    z = z - z.max()
    e = np.exp(z, dtype=np.float64)
    return (e / e.sum()).astype(F32)


def _layer_backward(layer, x_in, x_out, g):
    """Input cotangent and (weight, bias) grads for one layer."""
    if layer.kind == "dense":
        return g @ layer.weight.T, np.outer(x_in, g), g.copy()
    if layer.kind == "relu":
        return g * (x_in > 0), None, None
    if layer.kind == "flatten":
        return g.reshape(x_in.shape), None, None
    if layer.kind == "maxpool":
        dx = np.zeros_like(x_in)
        c, oh, ow = x_out.shape
        win = layer._windows(x_in).reshape(c, oh, ow, -1)
        amax = win.argmax(axis=3)
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    ky, kx = divmod(int(amax[ci, oy, ox]), layer.size)
                    dx[ci, oy * layer.stride + ky, ox * layer.stride + kx] += g[ci, oy, ox]
        return dx, None, None
    if layer.kind == "conv":
        oc, ic, kh, kw = layer.weight.shape
        cols, xp = im2col(x_in, kh, kw, layer.stride, layer.padding)
        gm = g.reshape(oc, -1)
        dw = (gm @ cols.T).reshape(layer.weight.shape)
        db = gm.sum(axis=1)
        dcols = layer.weight.reshape(oc, -1).T @ gm
        # fold columns back onto the (padded) input
        dxp = np.zeros_like(xp)
        oh, ow = g.shape[1], g.shape[2]
        idx = 0
        for ci in range(ic):
            for ky in range(kh):
                for kx in range(kw):
                    patch = dxp[ci, ky : ky + oh * layer.stride : layer.stride,
                                    kx : kx + ow * layer.stride : layer.stride]
                    patch += dcols[idx].reshape(oh, ow)
                    idx += 1
        p = layer.padding
        dx = dxp[:, p : p + x_in.shape[1], p : p + x_in.shape[2]] if p else dxp
        return dx.astype(F32, copy=False), dw.astype(F32), db.astype(F32)
    raise ConfigError(f"unknown layer kind {layer.kind}")


def backprop(net: Network, x, loss):
    """Loss value, d(loss)/d(input), and per-layer (dW, db) parameter grads."""
    _, acts = infer(net, x)
    n = len(net.layers)
    cotangents = [None] * (n + 1)
    if isinstance(loss, CrossEntropyLoss):
        p = _softmax(acts[-1])
        value = float(-np.log(max(p[loss.label], 1e-30)))
        g = p.copy()
        g[loss.label] -= 1.0
        cotangents[n] = g
    elif isinstance(loss, ActivationMatchLoss):
        value = 0.0
        for i, t in loss.targets.items():
            if acts[i].shape != t.shape:
                raise ShapeError(f"target for activation {i} has shape {t.shape}, "
                                 f"expected {acts[i].shape}")
            d = acts[i].astype(np.float64) - t.astype(np.float64)
            value += float((d * d).sum())
            cotangents[i] = (2.0 * d).astype(F32)
    else:
        raise ConfigError(f"unknown loss spec {loss!r}")

    param_grads = [None] * n
    g = cotangents[n] if cotangents[n] is not None else np.zeros_like(acts[n])
    for i in range(n - 1, -1, -1):
        dx, dw, db = _layer_backward(net.layers[i], acts[i], acts[i + 1], g)
        param_grads[i] = (dw, db)
        g = dx
        if cotangents[i] is not None:
            g = g + cotangents[i]
    return value, g, param_grads


def gradient(net: Network, x, loss):
    """d(loss)/d(input), same shape as the input."""
    return backprop(net, np.asarray(x, dtype=F32), loss)[1]


# ---------------------------------------------------------------------------
# Minimal SGD loop (CLI convenience, not a tuned trainer)


def fit_sgd(net: Network, inputs, labels, epochs=5, lr=0.05, seed=0, report=None):
    """Plain SGD on cross-entropy, one sample at a time, seeded shuffle."""
    rng = np.random.default_rng(seed)
    idx = np.arange(len(inputs))
    for epoch in range(epochs):
        rng.shuffle(idx)
        total = 0.0
        for j in idx:
            value, _, grads = backprop(net, inputs[j], CrossEntropyLoss(int(labels[j])))
            total += value
            for li, (dw, db) in enumerate(grads):
                if dw is None:
                    continue
                layer = net.layers[li]
                layer.weight -= F32(lr) * dw
                layer.bias -= F32(lr) * db
        if report:
            report(epoch, total / len(inputs))
    return net


def accuracy(net: Network, inputs, labels):
    hits = sum(1 for x, y in zip(inputs, labels) if infer(net, x)[0] == int(y))
    return hits / max(len(inputs), 1)
