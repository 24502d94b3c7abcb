"""Thin-lens circle-of-confusion model.

Blur radii come out in pixel units via an explicit ``pixel_scale`` field
(pixels per scene unit on the sensor); the underlying optics are computed
in scene units. The aperture coefficient ``A`` is treated as an opaque
positive number so that diameter-style and F-number-style readings share
one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LensParams:
    """Thin-lens description: focal length f, aperture coefficient A,
    focal-plane depth d0, and sensor resolution pixel_scale."""

    f: float
    A: float
    d0: float
    pixel_scale: float = 1.0

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if self.A <= 0:
            raise ValueError(f"aperture coefficient must be positive, got {self.A}")
        if self.d0 <= self.f:
            raise ValueError(
                f"focal-plane depth {self.d0} must exceed the focal length {self.f}"
            )
        if self.pixel_scale <= 0:
            raise ValueError(f"pixel_scale must be positive, got {self.pixel_scale}")


def coc_radius_exact(lens, d_p):
    """Blur radius in pixels for scene depth(s) d_p > 0.

    sigma = pixel_scale * (f*A/2) * |d_p - d0| / (d_p * (d0 - f));
    zero exactly on the focal plane.
    """
    d = np.asarray(d_p, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("coc_radius_exact: depths must be strictly positive")
    sigma = (
        0.5 * lens.f * lens.A * np.abs(d - lens.d0) / (d * (lens.d0 - lens.f))
    ) * lens.pixel_scale
    return sigma if sigma.ndim else float(sigma)


def alpha(lens):
    """Linear blur-vs-relative-depth coefficient f*A / (2*d0*(d0-f)),
    in inverse scene units (before pixel scaling)."""
    return lens.f * lens.A / (2.0 * lens.d0 * (lens.d0 - lens.f))


def coc_radius_approx(lens, eps_p):
    """Small-relative-depth linearization: sigma = pixel_scale * alpha * |eps|."""
    e = np.asarray(eps_p, dtype=np.float64)
    sigma = lens.pixel_scale * alpha(lens) * np.abs(e)
    return sigma if sigma.ndim else float(sigma)


def lens_from_film(f, film_distance, A, pixel_scale=1.0):
    """Lens whose focal plane is conjugate to a film at ``film_distance``:
    d0 = 1 / (1/f - 1/film_distance). Requires film_distance > f."""
    if film_distance <= f:
        raise ValueError(
            f"film distance {film_distance} must exceed the focal length {f}: "
            "no real focal plane"
        )
    d0 = 1.0 / (1.0 / f - 1.0 / film_distance)
    return LensParams(f=f, A=A, d0=d0, pixel_scale=pixel_scale)
