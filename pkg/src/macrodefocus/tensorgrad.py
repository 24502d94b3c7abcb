"""Minimal reverse-mode autodiff engine on numpy float32 arrays.

Covers exactly the op set the blur-prediction networks and image losses
need: elementwise arithmetic, relu/softplus/abs/sqrt/sin/cos, slicing,
channel concat, full reductions, same-padded 2-D convolution, fixed-window
depthwise filtering, positional encoding, and an Adam optimizer.

Design notes:
  - Tape-based: every op wires a backward closure into the output tensor.
    ``backward(loss)`` walks the graph once in reverse topological order.
  - Data and grads are float32; reductions accumulate in float64.
  - First-order gradients only; graphs are built per iteration and thrown
    away.
"""

from __future__ import annotations

import math

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording inside its scope."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _f32(x):
    return np.asarray(x, dtype=np.float32)


class Tensor:
    """N-d float32 array with optional gradient accumulation.

    ``grad`` is lazily allocated on first accumulation and always matches
    ``data``'s shape. Tensors are not safe for concurrent mutation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _f32(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        """Create an op output node. ``backward(grad)`` must accumulate into
        the parents via their ``accum_grad``."""
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def accum_grad(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _f32(g)

    def detach(self):
        """Constant view of this tensor's data (shared buffer, no graph)."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        data = self.data[idx]

        def backward(g):
            buf = np.zeros_like(self.data)
            buf[idx] = g
            self.accum_grad(buf)

        return Tensor._make(data, (self,), backward)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        a.accum_grad(_unbroadcast(g, a.data.shape))
        b.accum_grad(_unbroadcast(g, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        a.accum_grad(_unbroadcast(g, a.data.shape))
        b.accum_grad(_unbroadcast(-g, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        a.accum_grad(_unbroadcast(g * b.data, a.data.shape))
        b.accum_grad(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        a.accum_grad(_unbroadcast(g / b.data, a.data.shape))
        b.accum_grad(_unbroadcast(-g * out_data / b.data, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


# -- elementwise nonlinearities -----------------------------------------------


def relu(x):
    """max(0, x); the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0).astype(np.float32)

    def backward(g):
        x.accum_grad(g * mask)

    return Tensor._make(out_data, (x,), backward)


def absolute(x):
    """|x|; the subgradient at 0 is taken as 0 (sign convention)."""
    x = as_tensor(x)
    out_data = np.abs(x.data)

    def backward(g):
        x.accum_grad(g * np.sign(x.data))

    return Tensor._make(out_data, (x,), backward)


def softplus(x):
    """log(1 + exp(x)), computed overflow-safe; derivative is sigmoid(x)."""
    x = as_tensor(x)
    out_data = np.logaddexp(0.0, x.data).astype(np.float32)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
        x.accum_grad(g * sig.astype(np.float32))

    return Tensor._make(out_data, (x,), backward)


def sqrt(x):
    x = as_tensor(x)
    out_data = np.sqrt(x.data)

    def backward(g):
        x.accum_grad(g * (0.5 / np.maximum(out_data, 1e-12)))

    return Tensor._make(out_data, (x,), backward)


def sin(x):
    x = as_tensor(x)
    out_data = np.sin(x.data)

    def backward(g):
        x.accum_grad(g * np.cos(x.data))

    return Tensor._make(out_data, (x,), backward)


def cos(x):
    x = as_tensor(x)
    out_data = np.cos(x.data)

    def backward(g):
        x.accum_grad(-g * np.sin(x.data))

    return Tensor._make(out_data, (x,), backward)


def clip_max(x, hi):
    """min(x, hi); gradient is zero in the capped region."""
    x = as_tensor(x)
    mask = x.data < hi
    out_data = np.where(mask, x.data, hi).astype(np.float32)

    def backward(g):
        x.accum_grad(g * mask)

    return Tensor._make(out_data, (x,), backward)


def clip_min(x, lo):
    """max(x, lo); gradient is zero in the floored region."""
    x = as_tensor(x)
    mask = x.data > lo
    out_data = np.where(mask, x.data, lo).astype(np.float32)

    def backward(g):
        x.accum_grad(g * mask)

    return Tensor._make(out_data, (x,), backward)


# -- shape ops -----------------------------------------------------------------


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accum_grad(piece)

    return Tensor._make(out_data, tuple(tensors), backward)


def reshape(x, shape):
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        x.accum_grad(g.reshape(x.data.shape))

    return Tensor._make(out_data, (x,), backward)


# -- reductions ------------------------------------------------------------------


def tsum(x):
    """Sum of all elements, accumulated in float64, returned as a scalar tensor."""
    x = as_tensor(x)
    out_data = np.float32(x.data.sum(dtype=np.float64))

    def backward(g):
        x.accum_grad(np.full_like(x.data, np.float32(g)))

    return Tensor._make(out_data, (x,), backward)


def tmean(x):
    x = as_tensor(x)
    n = x.data.size
    out_data = np.float32(x.data.sum(dtype=np.float64) / n)

    def backward(g):
        x.accum_grad(np.full_like(x.data, np.float32(g / n)))

    return Tensor._make(out_data, (x,), backward)


# -- convolution ------------------------------------------------------------------


class Conv2dLayer:
    """Same-padded 2-D cross-correlation layer over HWC images.

    weights: [out_ch, in_ch, kh, kw] with odd kh, kw; bias: [out_ch].
    Output spatial size always equals input spatial size.
    """

    def __init__(self, in_ch, out_ch, ksize=3, rng=None, zero_init=False):
        if ksize % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {ksize}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        if zero_init:
            w = np.zeros((out_ch, in_ch, ksize, ksize), dtype=np.float32)
        else:
            rng = rng or np.random.default_rng()
            fan_in = in_ch * ksize * ksize
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_ch, in_ch, ksize, ksize))
        self.weights = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)

    @classmethod
    def identity(cls, channels, ksize=3):
        """Layer whose center tap is the identity map on ``channels``."""
        layer = cls(channels, channels, ksize, zero_init=True)
        c = ksize // 2
        w = layer.weights.data
        for ch in range(channels):
            w[ch, ch, c, c] = 1.0
        return layer

    def params(self):
        return [self.weights, self.bias]

    def param_count(self):
        return self.weights.size + self.bias.size

    def __call__(self, x):
        return conv2d_forward(x, self)


def conv2d_forward(x, layer):
    """Same-padded cross-correlation of an [H,W,Cin] image with a Conv2dLayer."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ValueError(f"conv2d expects an [H,W,C] input, got shape {x.data.shape}")
    if x.data.shape[2] != layer.in_ch:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.data.shape[2]}, layer expects {layer.in_ch}"
        )
    h, w = x.data.shape[:2]
    k = layer.ksize
    pad = k // 2
    wt, bias = layer.weights, layer.bias
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    out_data = np.broadcast_to(bias.data, (h, w, layer.out_ch)).copy()
    for i in range(k):
        for j in range(k):
            out_data += xp[i : i + h, j : j + w, :] @ wt.data[:, :, i, j].T

    def backward(g):
        bias.accum_grad(g.sum(axis=(0, 1), dtype=np.float64))
        gw = np.zeros_like(wt.data)
        gp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                patch = xp[i : i + h, j : j + w, :]
                gw[:, :, i, j] = np.einsum("hwc,hwo->oc", patch, g, optimize=True)
                gp[i : i + h, j : j + w, :] += g @ wt.data[:, :, i, j]
        wt.accum_grad(gw)
        x.accum_grad(gp[pad : pad + h, pad : pad + w, :])

    return Tensor._make(out_data, (x, wt, bias), backward)


def window_filter2d(x, kernel1d):
    """Depthwise separable filtering of an [H,W,C] image with a fixed
    symmetric 1-D kernel applied along both axes (zero padding, same size).

    For a symmetric kernel with zero padding the operator is self-adjoint,
    so the backward pass is the same filter applied to the gradient.
    """
    x = as_tensor(x)
    k = np.asarray(kernel1d, dtype=np.float32)
    if k.ndim != 1 or len(k) % 2 == 0 or not np.allclose(k, k[::-1]):
        raise ValueError("window_filter2d needs an odd-length symmetric 1-D kernel")

    def apply(arr):
        h, w = arr.shape[:2]
        r = len(k) // 2
        tmp = np.zeros_like(arr)
        ap = np.pad(arr, ((r, r), (0, 0), (0, 0)))
        for i, kv in enumerate(k):
            tmp += kv * ap[i : i + h]
        out = np.zeros_like(arr)
        tp = np.pad(tmp, ((0, 0), (r, r), (0, 0)))
        for i, kv in enumerate(k):
            out += kv * tp[:, i : i + w]
        return out

    out_data = apply(x.data)

    def backward(g):
        x.accum_grad(apply(g))

    return Tensor._make(out_data, (x,), backward)


def positional_encode(x, freq_count):
    """Frequency-encode an [H,W,1] map into [H,W,2L+1] channels.

    Channel order: identity, then (sin(2^l pi x), cos(2^l pi x)) for
    l = 0..L-1. Differentiable in x.
    """
    if freq_count < 1:
        raise ValueError(f"freq_count must be >= 1, got {freq_count}")
    x = as_tensor(x)
    parts = [x]
    for level in range(freq_count):
        scaled = mul(x, float((2.0**level) * math.pi))
        parts.append(sin(scaled))
        parts.append(cos(scaled))
    return concat(parts, axis=-1)


# -- graph traversal -----------------------------------------------------------


def backward(loss):
    """Accumulate gradients of a scalar loss into every reachable
    requires_grad tensor. Calling twice without zero_grad adds up."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.accum_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params):
    for p in params:
        p.zero_grad()


# -- optimizer ---------------------------------------------------------------


class AdamState:
    """Adam hyperparameters plus per-parameter moment buffers.

    Buffers are allocated on the first ``adam_step`` call and must
    shape-match the parameter list on every later call.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = None
        self.v = None


def adam_step(params, state):
    """One Adam update with bias correction. Grads are left untouched;
    the caller zeroes them."""
    for p in params:
        if p.grad is None:
            raise ValueError("adam_step: parameter is missing its gradient")
    if state.m is None:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or any(
        buf.shape != p.data.shape for buf, p in zip(state.m, params)
    ):
        raise ValueError("adam_step: moment buffers do not match the parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.float32)
