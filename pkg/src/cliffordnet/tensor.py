"""Dense tensors with reverse-mode automatic differentiation on a flat tape.

The engine covers exactly the operator set the backbone needs, nothing more.
Storage is row-major float32 with the channel axis innermost, so the rolling
interaction and Hadamard products run as contiguous-stride numpy kernels.
float64 is supported end to end: gradient checks run a high-precision shadow
of the same code path simply by building parameters with ``dtype=np.float64``.

Gradients are recorded on an append-only tape (`Graph`). Appending happens in
execution order, so walking the tape in strict reverse order is a valid
topological order for backpropagation. One graph is owned by one thread at a
time; tensors are immutable after creation except parameter updates applied
between steps.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError, DataError, DimensionError, UsageError

DEFAULT_DTYPE = np.float32

# When enabled, every op asserts a finite output. Cheap insurance for tests
# and debugging; off by default.
DEBUG_CHECKS = os.environ.get("CLIFFORDNET_DEBUG", "0") not in ("", "0")

_ACTIVE_GRAPH = None


class Graph:
    """Append-only gradient tape; use as a context manager around a step."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_GRAPH
        if _ACTIVE_GRAPH is not None:
            raise UsageError("a graph is already active; graphs do not nest")
        _ACTIVE_GRAPH = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_GRAPH
        _ACTIVE_GRAPH = None
        return False


class _Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """A dense array plus optional gradient and tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "graph")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self.graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """A view of the same values with no tape connection."""
        return Tensor(self.data, requires_grad=False)

    def sum(self):
        return _sum_all(self)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad})"


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or DEFAULT_DTYPE)


def _record(op, data, inputs, backward_fn):
    """Wrap `data` in a Tensor, appending a tape node if gradients flow."""
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op '{op}'")
    g = _ACTIVE_GRAPH
    track = g is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out.node_id = len(g.nodes)
        out.graph = g
        g.nodes.append(_Node(op, inputs, backward_fn))
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss):
    """Populate gradients of everything `loss` depends on.

    Leaf tensors accumulate into ``.grad``; repeated calls without zeroing
    keep accumulating. A detached scalar is a silent no-op.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.graph is None:
        return
    g = loss.graph
    grads = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        gout = grads.pop(nid, None)
        if gout is None:
            continue
        node = g.nodes[nid]
        for t, gin in zip(node.inputs, node.backward_fn(gout)):
            if gin is None or not t.requires_grad:
                continue
            if t.node_id is not None:
                acc = grads.get(t.node_id)
                grads[t.node_id] = gin if acc is None else acc + gin
            elif t.grad is None:
                t.grad = gin.copy()
            else:
                t.grad = t.grad + gin


# ---------------------------------------------------------------------------
# elementwise / linear algebra

def _broadcast_op(op, a, b, fwd, bwd_a, bwd_b):
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"{op}: cannot broadcast shapes {a.shape} and {b.shape}"
        ) from None
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward_fn(g):
        ga = _unbroadcast(bwd_a(g), a.shape) if need_a else None
        gb = _unbroadcast(bwd_b(g), b.shape) if need_b else None
        return ga, gb

    return _record(op, data, (a, b), backward_fn)


def add(a, b):
    return _broadcast_op("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b):
    return _broadcast_op("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b):
    """Hadamard product."""
    ad, bd = a.data, b.data
    return _broadcast_op("mul", a, b, np.multiply,
                         lambda g: g * bd, lambda g: g * ad)


def neg(a):
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}"
        )
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward_fn(g):
        ga = g @ bd.T if need_a else None
        gb = ad.T @ g if need_b else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), backward_fn)


def reshape(a, shape):
    orig = a.shape
    return _record("reshape", a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(orig),))


def _sum_all(a):
    shape, dtype = a.shape, a.data.dtype
    return _record("sum", a.data.sum(), (a,),
                   lambda g: (np.broadcast_to(g.astype(dtype), shape),))


# ---------------------------------------------------------------------------
# activations

def _stable_sigmoid(x):
    # exp(-|x|) is bounded in (0, 1]; no overflow for large |x|
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a):
    s = _stable_sigmoid(a.data)
    return _record("sigmoid", s, (a,), lambda g: (g * (s * (1.0 - s)),))


def silu(a):
    x = a.data
    s = _stable_sigmoid(x)
    return _record("silu", x * s, (a,),
                   lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


# ---------------------------------------------------------------------------
# channel roll

def roll_channels(a, s):
    """out[..., c] = a[..., (c+s) mod D]; backward rolls by -s."""
    d = a.shape[-1]
    s = int(s) % d
    data = np.roll(a.data, -s, axis=-1)
    return _record("roll", data, (a,),
                   lambda g: (np.roll(g, s, axis=-1),))


# ---------------------------------------------------------------------------
# normalization

def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize over the channel (last) axis, then affine."""
    d = a.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm: channel axis has size 0")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine shapes {gain.shape}/{bias.shape} "
            f"do not match channel size {d}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = y * gain.data + bias.data
    lead = tuple(range(a.ndim - 1))

    def backward_fn(g):
        ggain = (g * y).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        if a.requires_grad:
            dy = g * gain.data
            dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                        - y * (dy * y).mean(axis=-1, keepdims=True))
        else:
            dx = None
        return dx, ggain, gbias

    return _record("layer_norm", data, (a, gain, bias), backward_fn)


class BatchNormState:
    """Learnable affine plus running statistics for one batch-norm layer."""

    def __init__(self, dim, momentum=0.1, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(a, state, training):
    """Normalize per channel over batch and spatial axes.

    Running statistics are updated only when `training` is set (momentum 0.1,
    unbiased variance in the running estimate); eval mode is a deterministic
    affine map of the frozen statistics.
    """
    d = a.shape[-1]
    if d == 0:
        raise DimensionError("batch_norm: channel axis has size 0")
    axes = tuple(range(a.ndim - 1))
    x = a.data
    gain, bias = state.gain, state.bias
    eps = state.eps

    if training:
        n = int(np.prod([a.shape[i] for i in axes]))
        mu = x.mean(axis=axes)
        xc = x - mu
        var = np.mean(xc * xc, axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv
        m = state.momentum
        state.running_mean = ((1.0 - m) * state.running_mean
                              + m * mu).astype(state.running_mean.dtype)
        var_unbiased = var * (n / max(n - 1, 1))
        state.running_var = ((1.0 - m) * state.running_var
                             + m * var_unbiased).astype(state.running_var.dtype)

        def backward_fn(g):
            ggain = (g * y).sum(axis=axes) if gain.requires_grad else None
            gbias = g.sum(axis=axes) if bias.requires_grad else None
            if a.requires_grad:
                dy = g * gain.data
                dx = inv / n * (n * dy - dy.sum(axis=axes)
                                - y * (dy * y).sum(axis=axes))
            else:
                dx = None
            return dx, ggain, gbias
    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        y = (x - state.running_mean) * inv

        def backward_fn(g):
            ggain = (g * y).sum(axis=axes) if gain.requires_grad else None
            gbias = g.sum(axis=axes) if bias.requires_grad else None
            dx = g * (gain.data * inv) if a.requires_grad else None
            return dx, ggain, gbias

    data = y * gain.data + bias.data
    return _record("batch_norm", data, (a, gain, bias), backward_fn)


# ---------------------------------------------------------------------------
# convolutions

def dw_conv3x3(x, kernels, bias):
    """Depthwise 3x3 convolution, stride 1, zero padding 1."""
    if x.ndim != 4:
        raise DimensionError(f"dw_conv3x3: need rank-4 input, got {x.shape}")
    b, h, w, d = x.shape
    if kernels.shape != (d, 3, 3):
        raise DimensionError(
            f"dw_conv3x3: kernel shape {kernels.shape} does not match "
            f"{d} channels"
        )
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    k = kernels.data
    out = np.broadcast_to(bias.data, (b, h, w, d)).copy()
    for di in range(3):
        for dj in range(3):
            out += xp[:, di:di + h, dj:dj + w, :] * k[:, di, dj]

    def backward_fn(g):
        gk = None
        if kernels.requires_grad:
            gk = np.empty_like(k)
            for di in range(3):
                for dj in range(3):
                    gk[:, di, dj] = (g * xp[:, di:di + h, dj:dj + w, :]).sum(
                        axis=(0, 1, 2))
        gb = g.sum(axis=(0, 1, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    gxp[:, di:di + h, dj:dj + w, :] += g * k[:, di, dj]
            gx = gxp[:, 1:h + 1, 1:w + 1, :]
        return gx, gk, gb

    return _record("dw_conv3x3", out, (x, kernels, bias), backward_fn)


def conv_patch_embed(x, weight, patch):
    """Project non-overlapping patch x patch blocks to the model width."""
    if x.ndim != 4:
        raise DimensionError(f"conv_patch_embed: need rank-4 input, got {x.shape}")
    b, hh, ww, c = x.shape
    if hh % patch or ww % patch:
        raise ConfigError(
            f"conv_patch_embed: spatial dims {hh}x{ww} not divisible by "
            f"patch size {patch}"
        )
    h, w = hh // patch, ww // patch
    cols = patch * patch * c
    if weight.shape[0] != cols:
        raise DimensionError(
            f"conv_patch_embed: weight rows {weight.shape[0]} != {cols}"
        )
    # (B, h, P, w, P, C) -> (B, h, w, P, P, C) keeps the patch raster order
    patches = (x.data.reshape(b, h, patch, w, patch, c)
               .transpose(0, 1, 3, 2, 4, 5)
               .reshape(b * h * w, cols))
    dout = weight.shape[1]
    out = (patches @ weight.data).reshape(b, h, w, dout)

    def backward_fn(g):
        g2 = g.reshape(b * h * w, dout)
        gw = patches.T @ g2 if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gp = (g2 @ weight.data.T).reshape(b, h, w, patch, patch, c)
            gx = gp.transpose(0, 1, 3, 2, 4, 5).reshape(b, hh, ww, c)
        return gx, gw

    return _record("patch_embed", out, (x, weight), backward_fn)


# ---------------------------------------------------------------------------
# pooling / shaping / head

def global_avg_pool(x):
    """Mean over the spatial grid: (B, h, w, D) -> (B, D)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: need rank-4 input, got {x.shape}")
    b, h, w, d = x.shape
    data = x.data.mean(axis=(1, 2))
    scale = 1.0 / (h * w)

    def backward_fn(g):
        return (np.broadcast_to(g[:, None, None, :] * scale, x.shape),)

    return _record("global_avg_pool", data, (x,), backward_fn)


def concat_channels(xs):
    """Concatenate along the channel axis; all other axes must agree."""
    if not xs:
        raise DimensionError("concat_channels: empty input list")
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_channels: leading shapes differ: {lead} vs {t.shape[:-1]}"
            )
    data = np.concatenate([t.data for t in xs], axis=-1)
    splits = np.cumsum([t.shape[-1] for t in xs])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=-1))

    return _record("concat", data, tuple(xs), backward_fn)


def linear(x, weight, bias=None):
    """x @ weight (+ bias) applied to the last axis of x."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise DimensionError(
            f"linear: input channels {x.shape[-1]} != weight rows {din}"
        )
    x2 = x.data.reshape(-1, din)
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (dout,))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record("linear", out, inputs, backward_fn)


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax at the label index."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: need rank-2 logits, got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise DimensionError(
            f"cross_entropy: labels shape {labels.shape} != ({b},)"
        )
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(
            f"cross_entropy: label out of range [0, {k}): "
            f"min={labels.min()}, max={labels.max()}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    loss = -logp[np.arange(b), labels].mean()

    def backward_fn(g):
        p = ez / sez
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return _record("cross_entropy", np.asarray(loss, dtype=logits.dtype),
                   (logits,), backward_fn)


# ---------------------------------------------------------------------------
# initializers

def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value, requires_grad=False, dtype=DEFAULT_DTYPE):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)


def trunc_normal(rng, shape, std=0.02, dtype=DEFAULT_DTYPE):
    """Truncated normal at +/- 2 std, the isotropic-backbone convention."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return Tensor(x.astype(dtype), requires_grad=True)
