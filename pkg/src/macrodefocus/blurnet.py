"""Factored blur prediction: a depth branch and an RGB branch whose
elementwise product yields the per-view variance map.

Each branch is a small CNN: one or two hidden 3x3 conv layers of 32 units
(the second is added between training stages by ``grow``, initialized so
the composite function is preserved at the moment of growth) followed by a
zero-initialized 1-channel head. Positivity comes from softplus on each
branch output plus the SIGMA_MIN floor, so sigma >= SIGMA_MIN for any
parameters.

The depth input is recentered by the clarity-mask-weighted mean (the
per-view focal-depth estimate), normalized by the mask-weighted standard
deviation, and frequency-encoded before entering the depth branch.
"""

from __future__ import annotations

import struct

import numpy as np

from .svblur import SIGMA_MIN
from .tensorgrad import (
    Conv2dLayer,
    Tensor,
    absolute,
    concat,
    mul,
    positional_encode,
    relu,
    softplus,
    sqrt,
    sub,
    tsum,
)

HIDDEN_UNITS = 32
CONV_KSIZE = 3
DEFAULT_FREQ = 7

NET_MAGIC = b"MDBN"
NET_VERSION = 1
KIND_FACTORED = 0
KIND_PLAIN = 1


class BranchCNN:
    """Hidden conv stack (1 or 2 layers, ReLU) plus a linear head to one channel."""

    def __init__(self, in_ch, rng, hidden=HIDDEN_UNITS, ksize=CONV_KSIZE):
        self.in_ch = in_ch
        self.hidden = hidden
        self.ksize = ksize
        self.hidden1 = Conv2dLayer(in_ch, hidden, ksize, rng=rng)
        self.hidden2 = None
        self.head = Conv2dLayer(hidden, 1, ksize, zero_init=True)

    def grow(self):
        """Insert the second hidden layer as an exact identity: an identity
        center-tap conv followed by ReLU is the identity on the nonnegative
        activations it receives."""
        if self.hidden2 is not None:
            raise ValueError("branch already has its second layer")
        self.hidden2 = Conv2dLayer.identity(self.hidden, self.ksize)

    def __call__(self, x):
        h = relu(self.hidden1(x))
        if self.hidden2 is not None:
            h = relu(self.hidden2(h))
        return self.head(h)

    def params(self):
        layers = [self.hidden1, self.hidden2, self.head]
        return [p for layer in layers if layer is not None for p in layer.params()]

    def param_count(self):
        return sum(p.size for p in self.params())


class BlurNet:
    """Two-branch variance predictor; branches always share active depth."""

    def __init__(self, rng, freq=DEFAULT_FREQ, use_mask=True):
        self.freq = freq
        self.use_mask = use_mask
        self.rgb_in = 3 + (1 if use_mask else 0)
        self.depth_branch = BranchCNN(2 * freq + 1, rng)
        self.rgb_branch = BranchCNN(self.rgb_in, rng)
        self.active_depth = 1

    def grow(self):
        if self.active_depth != 1:
            raise ValueError("grow: network already has two active layers")
        self.depth_branch.grow()
        self.rgb_branch.grow()
        self.active_depth = 2

    def params(self):
        return self.depth_branch.params() + self.rgb_branch.params()

    def param_count(self):
        return self.depth_branch.param_count() + self.rgb_branch.param_count()


class PlainCNN:
    """Ablation baseline: one CNN over concatenated rgb + mask + depth
    (5 channels), same hidden width, growth schedule, and positivity."""

    def __init__(self, rng, freq=DEFAULT_FREQ, use_mask=True):
        self.freq = freq
        self.use_mask = use_mask
        self.branch = BranchCNN(5, rng)
        self.active_depth = 1

    def grow(self):
        if self.active_depth != 1:
            raise ValueError("grow: network already has two active layers")
        self.branch.grow()
        self.active_depth = 2

    def params(self):
        return self.branch.params()

    def param_count(self):
        return self.branch.param_count()


def coverage_weights(mask_normalized, depth):
    """Zero the weighted-mean mask where the depth map reports no coverage
    and renormalize; falls back to uniform weights when nothing is covered."""
    m = np.asarray(mask_normalized, dtype=np.float64).reshape(-1)
    covered = np.asarray(depth, dtype=np.float64).reshape(-1) > 0
    w = np.where(covered, m, 0.0)
    total = w.sum()
    if total <= 1e-12:
        if covered.any():
            w = covered / covered.sum()
        else:
            w = np.full_like(m, 1.0 / m.size)
    else:
        w = w / total
    return w.reshape(np.shape(mask_normalized)).astype(np.float32)


def relative_depth(depth, weights):
    """Recenter a depth map by its weighted mean.

    Returns (dhat, d0): dhat = |depth - d0| with d0 the weights-weighted
    mean depth (the per-view focal-depth estimate). Differentiable in depth;
    ``weights`` must sum to 1.
    """
    depth_t = depth if isinstance(depth, Tensor) else Tensor(depth)
    w_t = weights if isinstance(weights, Tensor) else Tensor(weights)
    d0 = tsum(mul(depth_t, w_t))
    dhat = absolute(sub(depth_t, d0))
    return dhat, d0


def _normalized_relative_depth(depth_t, weights):
    """dhat scaled by the weighted depth standard deviation, so the
    frequency encoding sees a scale-free signal across scenes."""
    w_t = Tensor(weights) if not isinstance(weights, Tensor) else weights
    dhat, d0 = relative_depth(depth_t, w_t)
    var = tsum(mul(w_t, mul(sub(depth_t, d0), sub(depth_t, d0))))
    wstd = sqrt(var + 1e-12)
    return dhat / (wstd + 1e-6), d0


def predict_variance(net, rendered_rgb, depth, mask):
    """Per-pixel blur standard deviation map, in full-resolution pixel units.

    ``net`` is a BlurNet or PlainCNN; ``rendered_rgb`` [H,W,3] and ``depth``
    [H,W,1] are tensors (detach the depth upstream to block scene-geometry
    gradients); ``mask`` is the view's ClarityMask. Output is [H,W,1] with
    sigma >= SIGMA_MIN, differentiable w.r.t. net parameters, rgb, and depth.
    """
    rgb_t = rendered_rgb if isinstance(rendered_rgb, Tensor) else Tensor(rendered_rgb)
    depth_t = depth if isinstance(depth, Tensor) else Tensor(depth)
    h, w = rgb_t.data.shape[:2]
    if depth_t.data.shape[:2] != (h, w):
        raise ValueError(
            f"predict_variance: depth {depth_t.data.shape[:2]} vs rgb {(h, w)}"
        )
    if depth_t.data.ndim == 2:
        from .tensorgrad import reshape

        depth_t = reshape(depth_t, (h, w, 1))
    if isinstance(net, PlainCNN):
        feats = [rgb_t, Tensor(mask.unit_scaled.data), _standardized(depth_t)]
        out = net.branch(concat(feats, axis=-1))
        return softplus(out) + SIGMA_MIN

    weights = coverage_weights(mask.normalized.data, depth_t.data)
    dnorm, _ = _normalized_relative_depth(depth_t, weights)
    encoded = positional_encode(dnorm, net.freq)
    e_out = net.depth_branch(encoded)
    rgb_feats = [rgb_t]
    if net.use_mask:
        rgb_feats.append(Tensor(mask.unit_scaled.data))
    a_out = net.rgb_branch(concat(rgb_feats, axis=-1) if len(rgb_feats) > 1 else rgb_t)
    return mul(softplus(a_out), softplus(e_out)) + SIGMA_MIN


def _standardized(depth_t):
    """Plain (unweighted) per-view standardization for the baseline CNN."""
    mean = float(depth_t.data.mean(dtype=np.float64))
    std = float(depth_t.data.std(dtype=np.float64)) + 1e-6
    return (depth_t - mean) * (1.0 / std)


# -- persistence ------------------------------------------------------------------


def _write_layer(blob, layer):
    blob += struct.pack("<II", layer.out_ch, layer.in_ch)
    blob += np.ascontiguousarray(layer.weights.data, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(layer.bias.data, dtype="<f4").tobytes()


def _read_layer(f, ksize=CONV_KSIZE):
    out_ch, in_ch = struct.unpack("<II", f.read(8))
    layer = Conv2dLayer(in_ch, out_ch, ksize, zero_init=True)
    count = out_ch * in_ch * ksize * ksize
    layer.weights.data = (
        np.frombuffer(f.read(4 * count), dtype="<f4").reshape(layer.weights.data.shape).copy()
    )
    layer.bias.data = np.frombuffer(f.read(4 * out_ch), dtype="<f4").copy()
    return layer


def save_net(net, path):
    """Flat float blob with a versioned header."""
    import os

    kind = KIND_PLAIN if isinstance(net, PlainCNN) else KIND_FACTORED
    blob = bytearray()
    blob += NET_MAGIC
    blob += struct.pack(
        "<IIIII", NET_VERSION, kind, net.freq, int(net.use_mask), net.active_depth
    )
    branches = [net.branch] if kind == KIND_PLAIN else [net.depth_branch, net.rgb_branch]
    for br in branches:
        for layer in (br.hidden1, br.hidden2, br.head):
            if layer is not None:
                _write_layer(blob, layer)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(blob))
    os.replace(tmp, path)


def load_net(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != NET_MAGIC:
            raise ValueError(f"not a network checkpoint: magic {magic!r}")
        version, kind, freq, use_mask, active_depth = struct.unpack("<IIIII", f.read(20))
        if version != NET_VERSION:
            raise ValueError(f"unsupported network checkpoint version {version}")
        rng = np.random.default_rng(0)
        if kind == KIND_PLAIN:
            net = PlainCNN(rng, freq=freq, use_mask=bool(use_mask))
            branches = [net.branch]
        else:
            net = BlurNet(rng, freq=freq, use_mask=bool(use_mask))
            branches = [net.depth_branch, net.rgb_branch]
        net.active_depth = active_depth
        for br in branches:
            br.hidden1 = _read_layer(f)
            if active_depth == 2:
                br.hidden2 = _read_layer(f)
            br.head = _read_layer(f)
    return net
