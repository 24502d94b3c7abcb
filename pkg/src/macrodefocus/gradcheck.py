"""Central finite-difference verification of every differentiable op.

Each check perturbs every coordinate of every input by +/-h (1e-3),
evaluates a float64 twin of the op (64-bit accumulation; inputs stay the
float32 values), and compares the central difference against the analytic
gradient from the float32 tape. A coordinate passes when the relative
error is below the op's tolerance; a check passes when at least 95% of
coordinates do (subgradient kinks and footprint-boundary crossings make a
small failure quota unavoidable on random inputs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensorgrad import Tensor, backward, zero_grads

DEFAULT_H = 1e-3
DEFAULT_TOL = 1e-3
MIN_PASS_FRACTION = 0.95


@dataclass
class CheckResult:
    name: str
    tol: float
    coords: int
    passed_coords: int
    worst_rel_err: float

    @property
    def ok(self):
        return self.passed_coords >= MIN_PASS_FRACTION * self.coords

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        return (
            f"[{status}] {self.name}: {self.passed_coords}/{self.coords} coords "
            f"within rel {self.tol:g} (worst {self.worst_rel_err:.3g})"
        )


def _ramp(shape):
    """Fixed all-nonzero projection pattern for probe losses."""
    size = int(np.prod(shape))
    return (((np.arange(size) % 17) + 3) / 10.0).reshape(shape)


def _probe(out):
    """Graph-side scalar probe: fixed projection of an op output."""
    from .tensorgrad import mul, tsum

    return tsum(mul(out, Tensor(_ramp(out.data.shape).astype(np.float32))))


def finite_difference_grad(f, arrays, index, h=DEFAULT_H):
    """Central-difference gradient of scalar ``f(arrays...)`` w.r.t.
    ``arrays[index]``, one coordinate at a time, in float64."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(*base))
        flat[i] = orig - h
        dn = float(f(*base))
        flat[i] = orig
        gflat[i] = (up - dn) / (2.0 * h)
    return grad


def check_op(name, build_loss, inputs, fd_loss, tol=DEFAULT_TOL, h=DEFAULT_H):
    """Compare the float32 tape gradient of ``build_loss(*tensors)`` against
    central finite differences of the float64 twin ``fd_loss(*arrays)``."""
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    loss = build_loss(*tensors)
    zero_grads(tensors)
    backward(loss)

    total = 0
    passed = 0
    worst = 0.0
    for idx, t in enumerate(tensors):
        analytic = (
            t.grad.astype(np.float64) if t.grad is not None else np.zeros(t.data.shape)
        )
        fd = finite_difference_grad(fd_loss, [tt.data for tt in tensors], idx, h=h)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-3)
        rel = np.abs(fd - analytic) / denom
        total += rel.size
        passed += int((rel <= tol).sum())
        if rel.size:
            worst = max(worst, float(rel.max()))
    return CheckResult(name, tol, total, passed, worst)


# -- float64 twins ---------------------------------------------------------------


def _conv_f64(x, layer):
    h, w = x.shape[:2]
    k = layer.ksize
    pad = k // 2
    wt = layer.weights.data.astype(np.float64)
    bias = layer.bias.data.astype(np.float64)
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    out = np.broadcast_to(bias, (h, w, layer.out_ch)).copy()
    for i in range(k):
        for j in range(k):
            out += xp[i : i + h, j : j + w, :] @ wt[:, :, i, j].T
    return out


def _branch_f64(branch, x):
    hcur = np.maximum(_conv_f64(x, branch.hidden1), 0.0)
    if branch.hidden2 is not None:
        hcur = np.maximum(_conv_f64(hcur, branch.hidden2), 0.0)
    return _conv_f64(hcur, branch.head)


def _softplus_f64(x):
    return np.logaddexp(0.0, x)


def _posenc_f64(x, freq):
    parts = [x]
    for level in range(freq):
        s = (2.0**level) * math.pi
        parts.append(np.sin(s * x))
        parts.append(np.cos(s * x))
    return np.concatenate(parts, axis=-1)


def _predict_variance_f64(net, rgb, depth, mask):
    from .blurnet import coverage_weights
    from .svblur import SIGMA_MIN

    d = depth.reshape(depth.shape[0], depth.shape[1], 1)
    weights = coverage_weights(mask.normalized.data, d).astype(np.float64)
    d0 = (d.reshape(-1) * weights.reshape(-1)).sum()
    dhat = np.abs(d - d0)
    var = (weights.reshape(-1) * (d.reshape(-1) - d0) ** 2).sum()
    dnorm = dhat / (math.sqrt(var + 1e-12) + 1e-6)
    e_out = _branch_f64(net.depth_branch, _posenc_f64(dnorm, net.freq))
    a_in = rgb
    if net.use_mask:
        a_in = np.concatenate([rgb, mask.unit_scaled.data.astype(np.float64)], axis=-1)
    a_out = _branch_f64(net.rgb_branch, a_in)
    return _softplus_f64(a_out) * _softplus_f64(e_out) + SIGMA_MIN


# -- suites ----------------------------------------------------------------------


def run_all_checks(seeds=range(10), progress=None):
    """Run the finite-difference suite for every differentiable op.

    Returns a list of CheckResult, one per (op, seed)."""
    from . import blurnet, clarity, imaging, splatscene, svblur
    from .imaging import ImagePlane
    from .tensorgrad import Conv2dLayer, concat, conv2d_forward, positional_encode, relu

    results = []

    def emit(res):
        results.append(res)
        if progress:
            progress(res)

    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)

        # conv2d: gradient w.r.t. input, weights, and bias
        x = rng.uniform(-1, 1, (8, 8, 2)).astype(np.float32)
        layer = Conv2dLayer(2, 2, 3, rng=rng)

        def conv_loss(xt, wt, bt, layer=layer):
            layer.weights, layer.bias = wt, bt
            return _probe(conv2d_forward(xt, layer))

        def conv_fd(xa, wa, ba, layer=layer):
            h, w = xa.shape[:2]
            xp = np.pad(xa, ((1, 1), (1, 1), (0, 0)))
            out = np.broadcast_to(ba, (h, w, wa.shape[0])).copy()
            for i in range(3):
                for j in range(3):
                    out += xp[i : i + h, j : j + w, :] @ wa[:, :, i, j].T
            return float((out * _ramp(out.shape)).sum())

        emit(
            check_op(
                f"conv2d seed={seed}",
                conv_loss,
                [x, layer.weights.data.copy(), layer.bias.data.copy()],
                conv_fd,
            )
        )

        x = rng.uniform(-1, 1, (6, 6, 3)).astype(np.float32)
        emit(
            check_op(
                f"relu seed={seed}",
                lambda t: _probe(relu(t)),
                [x],
                lambda a: float((np.maximum(a, 0.0) * _ramp(a.shape)).sum()),
            )
        )

        # freq capped so central-difference curvature (~h^2 f_max^3 / 6)
        # stays far below tolerance on cancellation-small coordinates
        x = rng.uniform(-1, 1, (6, 6, 1)).astype(np.float32)
        emit(
            check_op(
                f"positional_encode seed={seed}",
                lambda t: _probe(positional_encode(t, 2)),
                [x],
                lambda a: float(
                    (_posenc_f64(a, 2) * _ramp((a.shape[0], a.shape[1], 5))).sum()
                ),
            )
        )

        a = rng.uniform(0.2, 0.8, (16, 16, 1)).astype(np.float32)
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1).astype(np.float32)
        emit(
            check_op(
                f"d_ssim seed={seed}",
                lambda ta, tb: imaging.d_ssim_loss(ta, tb),
                [a, b],
                lambda aa, bb: 0.5 * (1.0 - imaging.ssim(aa, bb)),
                tol=1e-2,
            )
        )

        x = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)

        def tv_fd(arr):
            dx = np.abs(arr[:, 1:, :] - arr[:, :-1, :]).sum()
            dy = np.abs(arr[1:, :, :] - arr[:-1, :, :]).sum()
            return float((dx + dy) / arr.size)

        emit(
            check_op(
                f"tv_loss seed={seed}", lambda t: imaging.tv_loss(t), [x], tv_fd
            )
        )

        img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        sig = rng.uniform(0.5, 2.0, (8, 8, 1)).astype(np.float32)

        def svblur_fd(ia, sa):
            out = svblur.blur_f64(ia, sa.reshape(8, 8), 3)[0]
            return float((out * _ramp(out.shape)).sum())

        emit(
            check_op(
                f"sv_blur(image,sigma) seed={seed}",
                lambda ti, ts: _probe(svblur.sv_blur(ti, ts, 3)),
                [img, sig],
                svblur_fd,
            )
        )

        emit(_render_check(seed, rng))
        emit(_predict_variance_check(seed, rng))

    return results


def _render_check(seed, rng):
    """FD check of the splat renderer w.r.t. every latent: 3 splats, 16x16.

    The instance is rejection-sampled so that no footprint boundary sits
    within the perturbation window of an integer pixel edge: the truncation
    bbox is a step in the latents, and FD is only meaningful where the
    render is differentiable.
    """
    from . import splatscene
    from .tensorgrad import concat

    cam = splatscene.Camera.look_at(
        eye=(0.0, 0.0, -3.0),
        target=(0, 0, 0),
        up=(0, 1, 0),
        focal=18.0,
        height=16,
        width=16,
    )
    n = 3
    bg = (0.2, 0.3, 0.4)

    def margins_ok(pos, logr):
        state = splatscene.raster_f64(
            pos, logr, np.zeros((n, 3)), np.zeros(n), bg, cam, cutoff_sigmas=4.0
        )
        for k in range(n):
            if state["z"][k] <= splatscene.Z_NEAR:
                return False
            e = 4.0 * state["s_scr"][k]
            for bound in (
                state["v"][k] - e,
                state["v"][k] + e,
                state["u"][k] - e,
                state["u"][k] + e,
            ):
                if -0.05 < bound < 16.05:
                    frac = bound - math.floor(bound)
                    if frac < 0.05 or frac > 0.95:
                        return False
        return True

    for _attempt in range(500):
        pos = rng.uniform(-0.4, 0.4, (n, 3)).astype(np.float32)
        logr = np.log(rng.uniform(0.2, 0.35, n)).astype(np.float32)
        if margins_ok(pos, logr):
            break
    else:
        raise RuntimeError("could not sample a kink-free splat configuration")
    clogit = rng.normal(0, 0.8, (n, 3)).astype(np.float32)
    # opacities kept below the ALPHA_MAX clamp so no kink sits inside +/-h
    ologit = rng.uniform(-0.5, 1.5, n).astype(np.float32)
    scene = splatscene.SplatScene(pos, logr, clogit, ologit, bg)

    # The depth map snaps to 0 below the coverage threshold, a genuine step;
    # freeze a probe mask that skips pixels near that boundary so the check
    # differentiates the op where it is differentiable. The same fixed
    # projection weights both evaluation paths.
    base = splatscene.raster_f64(pos, logr, clogit, ologit, bg, cam, cutoff_sigmas=4.0)
    proj = _ramp((cam.height, cam.width, 5))
    proj[:, :, 3] *= base["alpha"] >= 5.0 * splatscene.COVERAGE_MIN

    def loss(pt, rt, ct, ot):
        scene.positions = pt
        scene.log_radius = rt
        scene.color_logit = ct
        scene.opacity_logit = ot
        rgb, depth, alpha = splatscene.render(scene, cam, cutoff_sigmas=4.0)
        packed = concat([rgb, depth, alpha], axis=-1)
        from .tensorgrad import mul, tsum

        return tsum(mul(packed, Tensor(proj.astype(np.float32))))

    def fd(pa, ra, ca, oa):
        state = splatscene.raster_f64(pa, ra, ca, oa, bg, cam, cutoff_sigmas=4.0)
        packed = np.concatenate(
            [state["rgb"], state["depth"][:, :, None], state["alpha"][:, :, None]],
            axis=2,
        )
        return float((packed * proj).sum())

    return check_op(
        f"splat_render seed={seed}", loss, [pos, logr, clogit, ologit], fd
    )


def _predict_variance_check(seed, rng):
    """FD check of the variance predictor w.r.t. the depth map."""
    from . import blurnet, clarity
    from .imaging import ImagePlane
    from .tensorgrad import Tensor

    net = blurnet.BlurNet(rng, freq=2)
    for p in net.params():
        p.data = p.data + rng.normal(0, 0.15, p.data.shape).astype(np.float32)
    # push hidden preactivations away from the ReLU kink: a unit flipping
    # sign between the two FD evaluations would corrupt that coordinate
    net.depth_branch.hidden1.bias.data += 1.0
    net.rgb_branch.hidden1.bias.data += 1.0
    rgb = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    mask = clarity.clarity_mask(ImagePlane(rgb))

    def kink_free(depth):
        """Reject depth maps whose perturbation window straddles a ReLU or
        |.| kink (FD needs a differentiable neighborhood)."""
        from .tensorgrad import Tensor as T
        from .tensorgrad import concat as cc
        from .tensorgrad import positional_encode as pe

        weights = blurnet.coverage_weights(mask.normalized.data, depth)
        dnorm, d0 = blurnet._normalized_relative_depth(T(depth), weights)
        if np.abs(depth - d0.item()).min() < 2e-2:
            return False
        pre1 = net.depth_branch.hidden1(pe(dnorm, net.freq))
        pre2 = net.rgb_branch.hidden1(
            cc([T(rgb), T(mask.unit_scaled.data)], axis=-1)
        )
        for pre in (pre1, pre2):
            if np.abs(pre.data).min() < 8e-3:
                return False
        return True

    for _attempt in range(500):
        depth = rng.uniform(85.0, 115.0, (8, 8, 1)).astype(np.float32)
        if kink_free(depth):
            break
    else:
        raise RuntimeError("could not sample a kink-free depth map")

    def loss(dt):
        return _probe(blurnet.predict_variance(net, Tensor(rgb), dt, mask))

    def fd(da):
        out = _predict_variance_f64(net, rgb.astype(np.float64), da, mask)
        return float((out * _ramp(out.shape)).sum())

    return check_op(f"predict_variance(depth) seed={seed}", loss, [depth], fd)
