"""Focus-region detection: high-frequency residual refined by a guided filter.

The mask is computed once per input image before training. Border policy is
replicate padding throughout (zero padding would fabricate high-frequency
response at image borders). Three views of the mask are produced: the raw
nonnegative map, a normalized map summing to 1 (for weighted means), and a
min-max scaled map in [0,1] (for channel concatenation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ImagePlane

MEAN_FILTER_HALFWIDTH = 3
# Guided-filter window is 5x5 (radius 2); regularization 0.3.
GUIDED_RADIUS = 2
GUIDED_EPS = 0.3

_DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class ClarityMask:
    """In-focus likelihood per pixel, in three normalizations."""

    raw: ImagePlane
    normalized: ImagePlane
    unit_scaled: ImagePlane


def _box_mean(arr, radius):
    """(2r+1)^2 box average with replicate padding, float64."""
    h, w = arr.shape[:2]
    ap = np.pad(arr.astype(np.float64), ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    acc = np.zeros((h, w, arr.shape[2]), dtype=np.float64)
    for i in range(2 * radius + 1):
        for j in range(2 * radius + 1):
            acc += ap[i : i + h, j : j + w]
    return acc / (2 * radius + 1) ** 2


def mean_filter(img, half_width=MEAN_FILTER_HALFWIDTH):
    """Box-average an image over a (2M+1)^2 window, replicate padded."""
    if half_width < 1:
        raise ValueError(f"mean_filter half-width must be >= 1, got {half_width}")
    plane = img if isinstance(img, ImagePlane) else ImagePlane(img)
    return ImagePlane(_box_mean(plane.data, half_width).astype(np.float32))


def coarse_focus_map(img, half_width=MEAN_FILTER_HALFWIDTH):
    """Channel-averaged |I - box(I)|: the high-frequency residual magnitude."""
    plane = img if isinstance(img, ImagePlane) else ImagePlane(img)
    blurred = _box_mean(plane.data, half_width)
    residual = np.abs(plane.data.astype(np.float64) - blurred)
    return ImagePlane(residual.mean(axis=2, keepdims=True).astype(np.float32))


def guided_filter(guide, src, radius=GUIDED_RADIUS, eps=GUIDED_EPS):
    """Edge-preserving smoothing of ``src`` by the local linear model of the
    guided filter, with ``guide`` (RGB converted to luma) steering the edges.

    Replicate-padded box means; equivalent to the explicit pairwise kernel
    evaluated under the same border convention.
    """
    if radius < 1:
        raise ValueError(f"guided_filter radius must be >= 1, got {radius}")
    if eps <= 0:
        raise ValueError(f"guided_filter eps must be positive, got {eps}")
    gplane = guide if isinstance(guide, ImagePlane) else ImagePlane(guide)
    splane = src if isinstance(src, ImagePlane) else ImagePlane(src)
    if splane.channels != 1:
        raise ValueError("guided_filter source must be single-channel")
    if (gplane.height, gplane.width) != (splane.height, splane.width):
        raise ValueError(
            f"guided_filter: guide {gplane.height}x{gplane.width} vs "
            f"src {splane.height}x{splane.width}"
        )
    g = gplane.gray().data.astype(np.float64)
    p = splane.data.astype(np.float64)
    mean_g = _box_mean(g, radius)
    mean_p = _box_mean(p, radius)
    corr_gp = _box_mean(g * p, radius)
    corr_gg = _box_mean(g * g, radius)
    var_g = corr_gg - mean_g * mean_g
    cov_gp = corr_gp - mean_g * mean_p
    a = cov_gp / (var_g + eps)
    b = mean_p - a * mean_g
    out = _box_mean(a, radius) * g + _box_mean(b, radius)
    return ImagePlane(out.astype(np.float32))


def clarity_mask(img, half_width=MEAN_FILTER_HALFWIDTH, radius=GUIDED_RADIUS, eps=GUIDED_EPS):
    """Full focus-detection pipeline for one image.

    The guide is the min-max normalized luma of the input, which makes the
    mask exactly invariant (up to raw-value scaling) under global affine
    brightness changes. A fully constant input degenerates to a uniform
    normalized mask so downstream weighted means stay defined.
    """
    plane = img if isinstance(img, ImagePlane) else ImagePlane(img)
    coarse = coarse_focus_map(plane, half_width)
    g = plane.gray().data.astype(np.float64)
    g_range = g.max() - g.min()
    if g_range > _DEGENERATE_EPS:
        g = (g - g.min()) / g_range
    else:
        g = np.zeros_like(g)
    fine = guided_filter(ImagePlane(g.astype(np.float32)), coarse, radius, eps)
    raw = np.clip(fine.data.astype(np.float64), 0.0, None)

    total = raw.sum()
    if total > _DEGENERATE_EPS:
        normalized = raw / total
    else:
        normalized = np.full_like(raw, 1.0 / raw.size)
    spread = raw.max() - raw.min()
    if spread > _DEGENERATE_EPS:
        unit = (raw - raw.min()) / spread
    else:
        unit = np.zeros_like(raw)
    return ClarityMask(
        raw=ImagePlane(raw.astype(np.float32)),
        normalized=ImagePlane(normalized.astype(np.float32)),
        unit_scaled=ImagePlane(unit.astype(np.float32)),
    )
