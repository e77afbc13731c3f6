"""Minimal CNN engine for ``(batch, channels, time)`` EEG inputs.

Activations are held as ``(batch * channels, time, maps)`` arrays.  Every
convolution acts along time only, so the EEG-channel axis survives untouched
until global average pooling.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels import flatten_weight, unflatten_weight
from .model import (LayerKind, LayerSpec, ModelSpec, avg_pool, dense, depthwise_conv,
                    global_avg_pool, pointwise_conv, relu, temporal_conv)

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Input extents do not fit the model."""


class TrainingError(RuntimeError):
    pass


def softmax(z, axis=-1):
    """Shift-stable softmax, always evaluated in float64."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[axis] < 2:
        raise ValueError(f"softmax needs at least 2 classes, got {z.shape[axis]}")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains NaN or infinity")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels under softmax(logits)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


class ForwardCache:
    """Per-layer contexts from one forward pass.

    ``feature_maps`` holds the GAP input (the post-ReLU output of the last
    convolution) in internal layout ``(batch, channels, time, maps)``.
    """

    def __init__(self, batch_shape):
        self.batch_shape = batch_shape
        self.contexts = []
        self.relu_masks = None
        self.feature_maps = None
        self.logits = None

    def gates(self, spec):
        """Boolean ReLU gates of this pass, in layer order."""
        if self.relu_masks is not None:
            return self.relu_masks
        return [ctx > 0 for l, ctx in zip(spec.layers, self.contexts)
                if l.kind == LayerKind.RELU]

    def final_maps(self):
        """Final feature maps as ``(batch, maps, channels, reduced_time)``."""
        return self.feature_maps.transpose(0, 3, 1, 2)


class Network:
    """A ``ModelSpec`` together with its parameters (the trained model)."""

    def __init__(self, spec, params, backend=None):
        self.spec = spec
        self.params = [list(p) for p in params]
        self.kernels = _kernels.get_kernels(backend)
        for i, (layer, ps) in enumerate(zip(spec.layers, self.params)):
            shapes = layer.param_shapes()
            if [tuple(p.shape) for p in ps] != [tuple(s) for s in shapes]:
                raise ShapeError(f"layer {i} ({layer.kind.name}) parameter shapes "
                                 f"{[p.shape for p in ps]} != {shapes}")

    @classmethod
    def init(cls, spec, rng, dtype=np.float32, backend=None):
        """Fan-in scaled uniform weights, zero biases."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        params = []
        for layer in spec.layers:
            shapes = layer.param_shapes()
            if not shapes:
                params.append([])
                continue
            gain = 3.0 if layer.kind == LayerKind.DENSE else 6.0
            bound = np.sqrt(gain / layer.fan_in())
            w = rng.uniform(-bound, bound, size=shapes[0]).astype(dtype)
            params.append([w, np.zeros(shapes[1], dtype=dtype)])
        return cls(spec, params, backend)

    @classmethod
    def zeros(cls, spec, dtype=np.float32, backend=None):
        return cls(spec, [[np.zeros(s, dtype=dtype) for s in l.param_shapes()]
                          for l in spec.layers], backend)

    @property
    def dtype(self):
        for ps in self.params:
            if ps:
                return ps[0].dtype
        return np.dtype(np.float32)

    def astype(self, dtype):
        return Network(self.spec, [[p.astype(dtype) for p in ps] for ps in self.params],
                       self.kernels.name)

    def copy(self):
        return self.astype(self.dtype)

    def named_params(self):
        for i, (layer, ps) in enumerate(zip(self.spec.layers, self.params)):
            for name, p in zip(("weight", "bias"), ps):
                yield f"{i}.{layer.kind.name.lower()}.{name}", p

    def dense_head(self):
        w, b = self.params[-1]
        return w, b

    def _check_input(self, x):
        spec = self.spec
        first = spec.layers[0]
        if x.ndim != 3:
            raise ShapeError(f"layer 0 ({first.kind.name}) expects (batch, channels, time) "
                             f"input, got shape {x.shape}")
        _, c, t = x.shape
        if spec.in_channels and c != spec.in_channels:
            raise ShapeError(f"layer 0 ({first.kind.name}) expects {spec.in_channels} "
                             f"channels, got {c}")
        if spec.in_timepoints and t != spec.in_timepoints:
            raise ShapeError(f"layer 0 ({first.kind.name}) expects {spec.in_timepoints} "
                             f"timepoints, got {t}")

    def forward(self, x, relu_masks=None):
        """Return ``(logits, cache)``; ``relu_masks`` freezes every ReLU gate."""
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None]
        self._check_input(x)
        b, c, t = x.shape
        dtype = self.dtype
        h = np.ascontiguousarray(x, dtype=dtype).reshape(b * c, t, 1)
        cache = ForwardCache((b, c, t))
        cache.relu_masks = None if relu_masks is None else list(relu_masks)
        kern = self.kernels
        n_relu = 0
        for i, (layer, ps) in enumerate(zip(self.spec.layers, self.params)):
            kind = layer.kind
            if kind == LayerKind.TEMPORAL_CONV:
                w, bias = ps
                col = kern.im2col(h, layer.kernel)
                w2 = flatten_weight(w)
                out = col @ w2
                out += bias
                cache.contexts.append((col, h.shape, w2))
                h = out.reshape(h.shape[0], h.shape[1], layer.maps_out)
            elif kind == LayerKind.DEPTHWISE_TEMPORAL_CONV:
                w, bias = ps
                cache.contexts.append(h)
                h = kern.depthwise_forward(h, w, bias)
            elif kind == LayerKind.POINTWISE_CONV:
                w, bias = ps
                cache.contexts.append(h)
                out = h.reshape(-1, layer.maps_in) @ w.T
                out += bias
                h = out.reshape(h.shape[0], h.shape[1], layer.maps_out)
            elif kind == LayerKind.RELU:
                if relu_masks is None:
                    # the output doubles as the gate: out > 0 iff input > 0
                    h = np.maximum(h, 0, out=h if i > 0 else None)
                    cache.contexts.append(h)
                else:
                    mask = relu_masks[n_relu]
                    h = h * mask
                    cache.contexts.append(mask)
                n_relu += 1
            elif kind == LayerKind.TEMPORAL_AVG_POOL:
                r, tt, f = h.shape
                if tt % layer.pool:
                    raise ShapeError(f"layer {i} (TEMPORAL_AVG_POOL) cannot pool {tt} "
                                     f"timepoints by {layer.pool}")
                cache.contexts.append(None)
                h = kern.pool_forward(h, layer.pool)
            elif kind == LayerKind.GLOBAL_AVG_POOL:
                r, tt, f = h.shape
                cache.feature_maps = h.reshape(b, c, tt, f)
                cache.contexts.append(h.shape)
                h = h.reshape(b, c * tt, f).mean(axis=1)
            elif kind == LayerKind.DENSE:
                w, bias = ps
                cache.contexts.append(h)
                h = h @ w.T + bias
        cache.logits = h
        return h, cache

    def backward(self, cache, labels):
        """Mean cross-entropy loss and its gradient for every parameter."""
        labels = np.asarray(labels)
        logits = cache.logits
        b = logits.shape[0]
        if labels.shape != (b,):
            raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
        if np.any((labels != 0) & (labels != 1)):
            raise ValueError("labels must be 0 or 1")
        p = softmax(logits, axis=1)
        loss = cross_entropy(logits, labels)
        d = p
        d[np.arange(b), labels] -= 1.0
        d = (d / b).astype(self.dtype)
        _, c, _ = cache.batch_shape
        kern = self.kernels
        grads = [[] for _ in self.spec.layers]
        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[i]
            ps = self.params[i]
            ctx = cache.contexts[i]
            kind = layer.kind
            need_dx = i > 0
            if kind == LayerKind.DENSE:
                w, _ = ps
                grads[i] = [d.T @ ctx, d.sum(axis=0)]
                d = d @ w
            elif kind == LayerKind.GLOBAL_AVG_POOL:
                r, tt, f = ctx
                dh = np.empty((b, c * tt, f), dtype=d.dtype)
                dh[...] = (d / (c * tt))[:, None, :]
                d = dh.reshape(r, tt, f)
            elif kind == LayerKind.RELU:
                d = kern.relu_grad(d, ctx) if ctx.dtype != bool else d * ctx
            elif kind == LayerKind.TEMPORAL_AVG_POOL:
                d = kern.pool_backward(d, layer.pool)
            elif kind == LayerKind.POINTWISE_CONV:
                w, _ = ps
                h = ctx
                d2 = d.reshape(-1, layer.maps_out)
                grads[i] = [d2.T @ h.reshape(-1, layer.maps_in), d2.sum(axis=0)]
                if need_dx:
                    d = (d2 @ w).reshape(h.shape)
            elif kind == LayerKind.DEPTHWISE_TEMPORAL_CONV:
                w, _ = ps
                dx, dw, db = kern.depthwise_backward(ctx, w, d, need_dx)
                grads[i] = [dw, db]
                d = dx
            elif kind == LayerKind.TEMPORAL_CONV:
                col, xshape, w2 = ctx
                d2 = d.reshape(-1, layer.maps_out)
                dw = unflatten_weight(col.T @ d2, layer.maps_out, layer.maps_in, layer.kernel)
                grads[i] = [dw, d2.sum(axis=0)]
                if need_dx:
                    d = kern.col2im(d2 @ w2.T, layer.kernel, xshape)
        return loss, grads

    def loss_and_grads(self, x, labels):
        _, cache = self.forward(x)
        return self.backward(cache, labels)

    def predict_proba(self, x, batch_size=100):
        """Class probabilities for ``x`` evaluated in fixed-order batches."""
        x = np.asarray(x)
        out = [softmax(self.forward(x[s:s + batch_size])[0], axis=1)
               for s in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.empty((0, 2))

    def predict(self, x, batch_size=100):
        return self.predict_proba(x, batch_size).argmax(axis=1)

    def to_bytes(self):
        return model_to_bytes(self)

    def checksum(self):
        return hashlib.sha256(model_to_bytes(self)).hexdigest()


def forward(model, batch):
    return model.forward(batch)


def backward(model, batch, labels):
    """Gradients of the mean cross-entropy for every parameter tensor."""
    return model.loss_and_grads(batch, labels)[1]


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [[np.zeros_like(p) for p in ps] for ps in params]
        self.v = [[np.zeros_like(p) for p in ps] for ps in params]
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for ps, gs, ms, vs in zip(params, grads, self.m, self.v):
            for p, g, m, v in zip(ps, gs, ms, vs):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: Network
    loss_history: list = field(default_factory=list)


def _arrays(data):
    if isinstance(data, tuple):
        x, y = data
    else:
        x, y = data.X, data.labels
    return np.asarray(x), np.asarray(y)


def train(spec, data, cfg, backend=None):
    """Train a fresh network; fully determined by (spec, data, cfg)."""
    x, y = _arrays(data)
    if len(x) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if len(np.unique(y)) < 2:
        raise TrainingError("training data must contain both classes")
    init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    net = Network.init(spec, np.random.default_rng(init_ss), backend=backend)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    opt = Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    n = len(x)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = net.loss_and_grads(x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}")
            opt.step(net.params, grads)
            total += loss * len(idx)
        history.append(total / n)
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    return TrainResult(net, history)


# gradient checking


@dataclass
class ParamCheck:
    name: str
    shape: tuple
    max_rel_error: float
    kink_entries: int


@dataclass
class GradCheckReport:
    entries: list

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)


def relative_error(analytic, numeric, floor=1e-7):
    """|a - n| / max(|a|, |n|), falling back to |a - n| when both are below floor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    return np.where(scale < floor, diff, diff / np.where(scale < floor, 1.0, scale))


def gradient_check(spec, x, labels, seed=0, step=1e-3, model=None):
    """Compare backprop against central differences in a float64 shadow copy.

    When a +/-step perturbation flips any ReLU gate, the difference is taken
    with the gates frozen at the unperturbed point, which is the derivative of
    the active linear piece.
    """
    if model is None:
        model = Network.init(spec, seed, dtype=np.float64)
    net = model.astype(np.float64)
    labels = np.asarray(labels)
    _, cache = net.forward(x)
    base_masks = cache.gates(net.spec)
    _, grads = net.backward(cache, labels)

    def loss_at(masks=None):
        logits, c = net.forward(x, relu_masks=masks)
        return cross_entropy(logits, labels), c.gates(net.spec)

    entries = []
    for i, (layer, ps) in enumerate(zip(spec.layers, net.params)):
        for j, p in enumerate(ps):
            numeric = np.empty(p.shape)
            kinks = 0
            flat = p.reshape(-1)
            for e in range(flat.size):
                orig = flat[e]
                flat[e] = orig + step
                lp, mp = loss_at()
                flat[e] = orig - step
                lm, mm = loss_at()
                if any(not np.array_equal(a, m0) for a, m0 in zip(mp, base_masks)) or \
                        any(not np.array_equal(a, m0) for a, m0 in zip(mm, base_masks)):
                    kinks += 1
                    flat[e] = orig + step
                    lp, _ = loss_at(base_masks)
                    flat[e] = orig - step
                    lm, _ = loss_at(base_masks)
                flat[e] = orig
                numeric.reshape(-1)[e] = (lp - lm) / (2 * step)
            err = float(relative_error(grads[i][j], numeric).max()) if p.size else 0.0
            name = f"{i}.{layer.kind.name.lower()}.{'weight' if j == 0 else 'bias'}"
            entries.append(ParamCheck(name, tuple(p.shape), err, kinks))
    return GradCheckReport(entries)


def random_check_case(rng):
    """Small random network using every layer kind, with a random batch."""
    m1, m2, m3 = (int(v) for v in rng.integers(1, 5, size=3))
    k1, k2, k3 = (int(v) for v in rng.integers(1, 6, size=3))
    c = int(rng.integers(1, 4))
    t = 4 * int(rng.integers(2, 5))
    spec = ModelSpec(c, t, [
        temporal_conv(1, m1, k1), relu(m1), avg_pool(m1, 2),
        temporal_conv(m1, m2, k2), relu(m2), avg_pool(m2, 2),
        depthwise_conv(m2, k3), relu(m2), pointwise_conv(m2, m3), relu(m3),
        global_avg_pool(m3), dense(m3)])
    b = int(rng.integers(1, 4))
    x = rng.standard_normal((b, c, t))
    y = rng.integers(0, 2, size=b)
    return spec, x, y


# model file format

MODEL_MAGIC = b"ICSM"
MODEL_VERSION = 1
_LAYER_HEADER = struct.Struct("<BHHHH")


class ModelFormatError(ValueError):
    pass


def model_to_bytes(model):
    layers = model.spec.layers
    out = [MODEL_MAGIC, struct.pack("<HH", MODEL_VERSION, len(layers))]
    for l in layers:
        out.append(_LAYER_HEADER.pack(int(l.kind), l.kernel, l.maps_in, l.maps_out, l.pool))
    for ps in model.params:
        for p in ps:
            out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


def model_from_bytes(buf, backend=None):
    """Parse an ICSM payload; the returned spec has unconstrained input extents."""
    if len(buf) < 8:
        raise ModelFormatError(f"truncated model header at offset 0 ({len(buf)} bytes)")
    if buf[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {buf[:4]!r} at offset 0, expected {MODEL_MAGIC!r}")
    version, n_layers = struct.unpack_from("<HH", buf, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version} at offset 4")
    off = 8
    layers = []
    for i in range(n_layers):
        if off + _LAYER_HEADER.size > len(buf):
            raise ModelFormatError(f"truncated layer header {i} at offset {off}")
        kind, kernel, mi, mo, pool = _LAYER_HEADER.unpack_from(buf, off)
        try:
            kind = LayerKind(kind)
        except ValueError:
            raise ModelFormatError(f"unknown layer kind {kind} at offset {off}") from None
        layers.append(LayerSpec(kind, mi, mo, kernel=kernel, pool=pool))
        off += _LAYER_HEADER.size
    try:
        spec = ModelSpec(0, 0, layers)
    except ValueError as exc:
        raise ModelFormatError(f"invalid layer table: {exc}") from None
    params = []
    for i, l in enumerate(layers):
        ps = []
        for shape in l.param_shapes():
            count = int(np.prod(shape))
            if off + 4 * count > len(buf):
                raise ModelFormatError(f"truncated parameters of layer {i} at offset {off}")
            ps.append(np.frombuffer(buf, dtype="<f4", count=count, offset=off)
                      .reshape(shape).astype(np.float32))
            off += 4 * count
        params.append(ps)
    if off != len(buf):
        raise ModelFormatError(f"{len(buf) - off} trailing bytes at offset {off}")
    return Network(spec, params, backend)


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path, backend=None):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), backend)
