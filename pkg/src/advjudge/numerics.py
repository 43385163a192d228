"""Dense-tensor network core with hand-written reverse-mode gradients.

Tensors are plain :class:`numpy.ndarray` objects. A :class:`NetworkModel` is
an ordered list of :class:`Layer` records; three layer kinds are supported:

* ``"convolution"``: 3x3 kernels, stride 1, zero padding of one pixel
* ``"max-pool"``: 2x2 windows, stride 2 (odd trailing rows/columns dropped)
* ``"fully-connected"``: flattens its input first

Every layer may be followed by a ``"relu"``, ``"sigmoid"`` or ``"none"``
activation. Models are float32 by default; ``model.astype(np.float64)`` gives a
double-precision copy used for gradient checking.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError, InvalidArgumentError, NumericError

CONV = "convolution"
POOL = "max-pool"
DENSE = "fully-connected"
LAYER_KINDS = (CONV, POOL, DENSE)
ACTIVATIONS = ("relu", "sigmoid", "none")

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"ADVJ"
CHECKPOINT_VERSION = 1


def softmax(logits):
    """Numerically stable softmax over the last axis.

    Accepts a rank-1 logit vector or a batch of them (rank 2).
    """
    z = np.asarray(logits)
    if z.ndim not in (1, 2) or z.shape[-1] == 0:
        raise InvalidArgumentError(f"softmax expects nonempty rank-1 or rank-2 logits, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("softmax received non-finite logits")
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cross_entropy(probs, label):
    """Negative log-likelihood ``-log(probs[label])`` with the probability
    floored at 1e-12.

    ``probs`` may be a single distribution with an integer ``label`` or a
    batch ``(n, k)`` with an integer array of labels, in which case the
    per-sample losses are returned.
    """
    p = np.asarray(probs)
    lab = np.asarray(label)
    k = p.shape[-1]
    if np.any(lab < 0) or np.any(lab >= k):
        raise InvalidArgumentError(f"label {label!r} out of range for {k} classes")
    if p.ndim == 1:
        return float(-np.log(max(float(p[int(lab)]), PROB_FLOOR)))
    picked = p[np.arange(p.shape[0]), lab]
    return -np.log(np.maximum(picked, PROB_FLOOR))


@dataclass
class Layer:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidArgumentError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.kind == POOL:
            if self.weight is not None or self.bias is not None:
                raise InvalidArgumentError("max-pool layers carry no parameters")
        elif self.weight is None or self.bias is None:
            raise InvalidArgumentError(f"{self.kind} layer needs weight and bias")

    @property
    def params(self):
        return [] if self.kind == POOL else [self.weight, self.bias]


def _output_shape(layer, shape):
    if layer.kind == CONV:
        c, h, w = shape
        f, wc, kh, kw = layer.weight.shape
        if wc != c or (kh, kw) != (3, 3) or layer.bias.shape != (f,):
            raise InvalidArgumentError(f"convolution weight {layer.weight.shape} incompatible with input {shape}")
        return (f, h, w)
    if layer.kind == POOL:
        c, h, w = shape
        if h < 2 or w < 2:
            raise InvalidArgumentError(f"max-pool needs at least 2x2 input, got {shape}")
        return (c, h // 2, w // 2)
    n_in = int(np.prod(shape))
    n_out, w_in = layer.weight.shape
    if w_in != n_in or layer.bias.shape != (n_out,):
        raise InvalidArgumentError(f"fully-connected weight {layer.weight.shape} incompatible with input {shape}")
    return (n_out,)


class NetworkModel:
    """Feed-forward network: layer records plus the expected input shape."""

    def __init__(self, layers, input_shape, metadata=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.metadata = dict(metadata or {})
        shape = self.input_shape
        self.layer_shapes = [shape]
        for layer in self.layers:
            shape = _output_shape(layer, shape)
            self.layer_shapes.append(shape)
        if len(shape) != 1:
            raise InvalidArgumentError("the last layer must be fully-connected")
        for p in self.parameters():
            if not np.all(np.isfinite(p)):
                raise NumericError("model contains non-finite weights")

    @property
    def num_outputs(self):
        return self.layer_shapes[-1][0]

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def parameters(self):
        """All parameter arrays in layer order, weight before bias."""
        return [p for layer in self.layers for p in layer.params]

    def astype(self, dtype):
        layers = [
            Layer(l.kind,
                  None if l.weight is None else l.weight.astype(dtype),
                  None if l.bias is None else l.bias.astype(dtype),
                  l.activation)
            for l in self.layers
        ]
        return NetworkModel(layers, self.input_shape, copy.deepcopy(self.metadata))

    def copy(self):
        return self.astype(self.dtype)

    def __repr__(self):
        parts = []
        for layer, shape in zip(self.layers, self.layer_shapes[1:]):
            parts.append(f"{layer.kind}->{'x'.join(map(str, shape))}({layer.activation})")
        return f"NetworkModel(input={self.input_shape}, {', '.join(parts)})"


def init_network(input_shape, architecture, seed=0, dtype=np.float32):
    """Build a network with Glorot-uniform weights and zero biases.

    ``architecture`` is a sequence of tuples: ``("convolution", filters,
    activation)``, ``("max-pool",)`` or ``("fully-connected", units,
    activation)``.
    """
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(input_shape)
    for entry in architecture:
        kind = entry[0]
        if kind == POOL:
            layer = Layer(POOL)
        elif kind == CONV:
            filters, act = entry[1], entry[2]
            fan_in, fan_out = shape[0] * 9, filters * 9
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(filters, shape[0], 3, 3))
            layer = Layer(CONV, w.astype(dtype), np.zeros(filters, dtype), act)
        elif kind == DENSE:
            units, act = entry[1], entry[2]
            fan_in = int(np.prod(shape))
            lim = np.sqrt(6.0 / (fan_in + units))
            w = rng.uniform(-lim, lim, size=(units, fan_in))
            layer = Layer(DENSE, w.astype(dtype), np.zeros(units, dtype), act)
        else:
            raise InvalidArgumentError(f"unknown layer kind {kind!r}")
        shape = _output_shape(layer, shape)
        layers.append(layer)
    return NetworkModel(layers, input_shape)


# -- forward / backward -----------------------------------------------------

def _as_batch(model, x):
    x = np.asarray(x)
    if x.shape == model.input_shape:
        return x[None].astype(model.dtype, copy=False), True
    if x.ndim == len(model.input_shape) + 1 and x.shape[1:] == model.input_shape:
        return x.astype(model.dtype, copy=False), False
    raise InvalidArgumentError(f"input shape {x.shape} does not match model input {model.input_shape}")


# Spatial activations are kept channels-last (n, h, w, c) internally; the
# public API and the parameter layout stay channels-first.

def _conv_matrix(w):
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)  # f, (kh, kw, c)


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i:i + h, j:j + wd, :] for i in range(3) for j in range(3)], axis=-1)
    cols = cols.reshape(n * h * wd, 9 * c)
    out = cols @ _conv_matrix(w).T + b
    return out.reshape(n, h, wd, -1), cols


def _conv_backward(dout, cols, w, x_shape, need_input=True, need_params=True):
    n, h, wd, c = x_shape
    f = w.shape[0]
    d = dout.reshape(-1, f)
    if need_params:
        dw = (d.T @ cols).reshape(f, 3, 3, c).transpose(0, 3, 1, 2)
        db = d.sum(axis=0)
    else:
        dw = db = None
    if not need_input:
        return dw, db, None
    dcols = (d @ _conv_matrix(w)).reshape(n, h, wd, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, k, :]
    return dw, db, dxp[:, 1:-1, 1:-1, :]


def _pool_forward(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    r = x[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c)
    tl, tr, bl, br = r[:, :, 0, :, 0], r[:, :, 0, :, 1], r[:, :, 1, :, 0], r[:, :, 1, :, 1]
    top = np.maximum(tl, tr)
    bottom = np.maximum(bl, br)
    out = np.maximum(top, bottom)
    # index of the first maximal corner (row-major), so ties route the
    # gradient to exactly one input
    idx = np.where(top >= bottom, tr > tl, 2 + (br > bl)).astype(np.int8)
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    dwin = np.zeros((n, h2, 2, w2, 2, c), dtype=dout.dtype)
    for k in range(4):
        di, dj = divmod(k, 2)
        dwin[:, :, di, :, dj] = np.where(idx == k, dout, 0)
    dwin = dwin.reshape(n, 2 * h2, 2 * w2, c)
    if (2 * h2, 2 * w2) == (h, w):
        return dwin
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :2 * h2, :2 * w2, :] = dwin
    return dx


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0)
    if act == "sigmoid":
        return sigmoid(z)
    return z


def _flatten(a):
    if a.ndim == 4:
        return a.transpose(0, 3, 1, 2).reshape(a.shape[0], -1)
    return a.reshape(a.shape[0], -1)


def _forward_cached(model, x):
    caches = []
    a = x.transpose(0, 2, 3, 1) if x.ndim == 4 else x
    for layer in model.layers:
        if layer.kind == CONV:
            z, aux = _conv_forward(a, layer.weight, layer.bias)
        elif layer.kind == POOL:
            z, aux = _pool_forward(a)
        else:
            z = _flatten(a) @ layer.weight.T + layer.bias
            aux = None
        out = _activate(z, layer.activation)
        caches.append((a.shape, aux if layer.kind != DENSE else _flatten(a), out))
        a = out
    return a, caches


def _backward_cached(model, caches, upstream, need_input=True, need_params=True):
    grads = []
    d = upstream
    n_layers = len(model.layers)
    for pos, (layer, (in_shape, aux, out)) in enumerate(zip(reversed(model.layers), reversed(caches))):
        first = pos == n_layers - 1
        if layer.activation == "relu":
            d = d * (out > 0)
        elif layer.activation == "sigmoid":
            d = d * out * (1 - out)
        if layer.kind == CONV:
            dw, db, d = _conv_backward(d, aux, layer.weight, in_shape, need_input or not first, need_params)
            grads.append((dw, db))
        elif layer.kind == POOL:
            d = _pool_backward(d, aux, in_shape)
        else:
            grads.append((d.T @ aux, d.sum(axis=0)) if need_params else (None, None))
            if first and not need_input:
                d = None
                continue
            d = d @ layer.weight
            if len(in_shape) == 4:
                n, h, w, c = in_shape
                d = d.reshape(n, c, h, w).transpose(0, 2, 3, 1)
            else:
                d = d.reshape(in_shape)
    flat_grads = [g for pair in reversed(grads) for g in pair]
    if d is not None and d.ndim == 4:
        d = np.ascontiguousarray(d.transpose(0, 3, 1, 2))
    return flat_grads, d


def logit_input_gradient(model, x, upstream):
    """Gradient of ``sum(upstream * forward(model, x))`` with respect to a
    batch ``x`` only; skips the parameter gradients. Returns ``(logits, dx)``.

    ``upstream`` may be a callable ``logits -> upstream`` so the caller can
    build it from the same forward pass.
    """
    xb, single = _as_batch(model, x)
    logits, caches = _forward_cached(model, xb)
    up = upstream(logits) if callable(upstream) else upstream
    up = np.asarray(up, dtype=model.dtype).reshape(logits.shape)
    _, dx = _backward_cached(model, caches, up, need_params=False)
    return (logits[0], dx[0]) if single else (logits, dx)


def forward(model, x):
    """Logits for one input (shape ``model.input_shape``) or a batch."""
    xb, single = _as_batch(model, x)
    out, _ = _forward_cached(model, xb)
    return out[0] if single else out


def backward(model, x, upstream):
    """Reverse-mode gradients of ``sum(upstream * forward(model, x))``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` follows
    :meth:`NetworkModel.parameters` order and is summed over the batch.
    """
    xb, single = _as_batch(model, x)
    up = np.asarray(upstream, dtype=model.dtype)
    if single:
        up = up.reshape(1, -1)
    if up.shape != (xb.shape[0], model.num_outputs):
        raise InvalidArgumentError(f"upstream gradient shape {up.shape} does not match outputs")
    _, caches = _forward_cached(model, xb)
    grads, dx = _backward_cached(model, caches, up)
    return grads, (dx[0] if single else dx)


def forward_backward(model, x, loss_grad, need_input_grad=True):
    """Single-pass forward then backward.

    ``loss_grad(logits) -> (loss, dlogits)`` supplies the upstream gradient.
    Returns ``(loss, logits, param_grads, input_grad)`` for batch input;
    ``input_grad`` is None when ``need_input_grad`` is false and the first
    layer is a convolution.
    """
    xb, _ = _as_batch(model, x)
    logits, caches = _forward_cached(model, xb)
    loss, up = loss_grad(logits)
    grads, dx = _backward_cached(model, caches, up.astype(model.dtype, copy=False), need_input_grad)
    return loss, logits, grads, dx


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of ``params`` with bias-corrected moments."""
    if len(params) != len(grads):
        raise InvalidArgumentError("gradient list does not match parameter list")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("NaN or infinite gradient passed to adam_step")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


# -- checkpoint files -------------------------------------------------------

def save_checkpoint(model, path):
    """Write ``model`` in the ADVJ checkpoint layout."""
    header = {
        "input_shape": list(model.input_shape),
        "layers": [
            {
                "kind": l.kind,
                "activation": l.activation,
                "weight_shape": None if l.weight is None else list(l.weight.shape),
                "bias_shape": None if l.bias is None else list(l.bias.shape),
            }
            for l in model.layers
        ],
        "metadata": model.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for p in model.parameters():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an ADVJ checkpoint")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    offset = 16 + hlen
    layers = []
    for spec in header["layers"]:
        arrays = []
        for key in ("weight_shape", "bias_shape"):
            shape = spec[key]
            if shape is None:
                arrays.append(None)
                continue
            count = int(np.prod(shape))
            if offset + 4 * count > len(data):
                raise FormatError(f"{path}: parameter block truncated")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
            arrays.append(arr.astype(np.float32))
            offset += 4 * count
        layers.append(Layer(spec["kind"], arrays[0], arrays[1], spec["activation"]))
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return NetworkModel(layers, header["input_shape"], header.get("metadata"))
