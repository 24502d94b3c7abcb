"""Per-pixel isotropic Gaussian blur and its exact adjoints.

Each output pixel gathers neighbors within a (2K+1)^2 support using its own
truncated, renormalized Gaussian kernel; outputs are differentiable with
respect to both the image and the per-pixel standard deviation map. Kernel
weights are recomputed on the fly instead of materialized as H*W*(2K+1)^2
buffers. Image borders use replicate padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import ImagePlane
from .tensorgrad import Tensor

# Floor applied by callers before kernel construction (delta-kernel limit);
# cap keeps heavily truncated kernels sane.
SIGMA_MIN = 1e-3
SIGMA_CAP_FACTOR = 2.0


@dataclass(frozen=True)
class KernelSpec:
    """Blur kernel support: half-width K, footprint (2K+1)^2 pixels."""

    K: int = 6

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"kernel half-width must be >= 1, got {self.K}")

    @property
    def size(self):
        return 2 * self.K + 1


@dataclass(frozen=True)
class VarianceMap:
    """Per-pixel blur standard deviation in pixel units, floored at SIGMA_MIN."""

    sigma: ImagePlane

    def __post_init__(self):
        data = self.sigma.data
        if self.sigma.channels != 1:
            raise ValueError("variance map must be single-channel")
        if not np.all(np.isfinite(data)):
            raise ValueError("variance map contains non-finite values")
        if data.min() < SIGMA_MIN - 1e-9:
            raise ValueError(
                f"variance map minimum {data.min():g} is below the {SIGMA_MIN:g} floor"
            )


def floor_sigma(arr):
    """Clamp an array of blur sigmas up to the SIGMA_MIN floor."""
    return np.maximum(np.asarray(arr, dtype=np.float32), np.float32(SIGMA_MIN))


def gaussian_kernel(sigma_p, K):
    """(2K+1)x(2K+1) isotropic Gaussian weights, renormalized to sum 1
    after truncation. sigma_p must respect the SIGMA_MIN floor."""
    if K < 1:
        raise ValueError(f"kernel half-width must be >= 1, got {K}")
    if sigma_p < SIGMA_MIN - 1e-9:
        raise ValueError(f"sigma {sigma_p:g} is below the {SIGMA_MIN:g} floor")
    ax = np.arange(-K, K + 1, dtype=np.float64)
    r2 = ax[:, None] ** 2 + ax[None, :] ** 2
    w = np.exp(-r2 / (2.0 * float(sigma_p) ** 2))
    return w / w.sum()


def _offsets_r2(K):
    ax = np.arange(-K, K + 1, dtype=np.float64)
    return (ax[:, None] ** 2 + ax[None, :] ** 2).reshape(-1)


def _fold_replicate_pad(gp, K):
    """Adjoint of edge-replicate padding: fold padded-border gradient
    contributions back onto the clamped source pixels, rows then columns."""
    core = gp[K:-K, :, :].copy()
    core[0] += gp[:K, :, :].sum(axis=0)
    core[-1] += gp[-K:, :, :].sum(axis=0)
    out = core[:, K:-K, :].copy()
    out[:, 0] += core[:, :K, :].sum(axis=1)
    out[:, -1] += core[:, -K:, :].sum(axis=1)
    return out


def blur_f64(image, sigma2d, K):
    """Float64 forward path shared by the differentiable op and by
    finite-difference verification. Returns the blurred image plus the
    intermediates the backward pass needs."""
    h, w = image.shape[:2]
    cap = SIGMA_CAP_FACTOR * K
    sig64 = np.asarray(sigma2d, dtype=np.float64)
    sig = np.minimum(sig64, cap)
    capped = sig64 > cap

    r2 = _offsets_r2(K)
    size = 2 * K + 1
    expo = np.exp(-r2[None, None, :] / (2.0 * sig[:, :, None] ** 2))
    z = expo.sum(axis=2, keepdims=True)
    weights = expo / z

    padded = np.pad(
        np.asarray(image, dtype=np.float64), ((K, K), (K, K), (0, 0)), mode="edge"
    )
    windows = sliding_window_view(padded, (size, size), axis=(0, 1))
    out64 = np.einsum(
        "hwcij,hwij->hwc", windows, weights.reshape(h, w, size, size), optimize=True
    )
    return out64, weights, windows, padded, sig, capped, r2


def sv_blur(sharp, sigma, K):
    """Spatially varying Gaussian blur of an [H,W,C] image tensor by a
    per-pixel sigma tensor ([H,W] or [H,W,1]), differentiable in both.

    Internals run in float64; sigmas are capped at 2K before kernel
    construction (zero gradient in the capped region).
    """
    sharp = sharp if isinstance(sharp, Tensor) else Tensor(sharp)
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    if sharp.data.ndim != 3:
        raise ValueError(f"sv_blur expects an [H,W,C] image, got {sharp.data.shape}")
    h, w = sharp.data.shape[:2]
    sig2d = sigma.data.reshape(h, w) if sigma.data.ndim == 3 else sigma.data
    if sig2d.shape != (h, w):
        raise ValueError(
            f"sv_blur: sigma shape {sigma.data.shape} does not match image {h}x{w}"
        )
    if sig2d.min() < SIGMA_MIN - 1e-9:
        raise ValueError(
            f"sv_blur: sigma minimum {sig2d.min():g} is below the {SIGMA_MIN:g} floor"
        )
    size = 2 * K + 1
    out64, weights, windows, padded, sig, capped, r2 = blur_f64(sharp.data, sig2d, K)

    def backward(g):
        g64 = g.astype(np.float64)
        # image adjoint: scatter each pixel's kernel back over its support
        gp = np.zeros_like(padded)
        wflat = weights.reshape(h, w, size * size)
        idx = 0
        for i in range(size):
            for j in range(size):
                gp[i : i + h, j : j + w, :] += wflat[:, :, idx, None] * g64
                idx += 1
        sharp.accum_grad(_fold_replicate_pad(gp, K))
        # sigma adjoint via the quotient rule through the renormalized kernel:
        # d w_o / d sigma = w_o * (r2_o - <r2>) / sigma^3
        wr2 = weights * r2[None, None, :]
        mean_r2 = wr2.sum(axis=2)
        moment = np.einsum(
            "hwcij,hwij->hwc", windows, wr2.reshape(h, w, size, size), optimize=True
        )
        dout_dsig = (moment - mean_r2[:, :, None] * out64) / (sig**3)[:, :, None]
        gsig = (g64 * dout_dsig).sum(axis=2)
        gsig[capped] = 0.0
        sigma.accum_grad(gsig.reshape(sigma.data.shape))

    return Tensor._make(out64.astype(np.float32), (sharp, sigma), backward)


def sv_blur_forward(sharp, variance, K=KernelSpec().K):
    """Convenience wrapper: blur an ImagePlane by a VarianceMap (or sigma
    ImagePlane), returning an ImagePlane."""
    plane = sharp if isinstance(sharp, ImagePlane) else ImagePlane(sharp)
    sig = variance.sigma if isinstance(variance, VarianceMap) else variance
    sig = sig if isinstance(sig, ImagePlane) else ImagePlane(sig)
    out = sv_blur(Tensor(plane.data), Tensor(sig.data), K)
    return ImagePlane(out.data)
