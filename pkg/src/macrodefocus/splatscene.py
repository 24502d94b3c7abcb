"""Differentiable isotropic Gaussian-splat scene and pinhole renderer.

Splats project to screen-space isotropic Gaussians (screen sigma =
radius * focal / depth), are composited front to back with per-pixel
transmittance, and produce color, alpha-weighted expected depth, and
accumulated alpha. The backward pass reconstructs per-splat transmittance
by a reverse sweep and yields exact adjoints for every splat latent.

Latent parameterization keeps invariants by construction: radius = exp,
color and opacity = sigmoid. Rasterization order is a stable depth sort,
so renders are bit-reproducible.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .imaging import ImagePlane
from .tensorgrad import Tensor, no_grad

ALPHA_MAX = 0.99  # per-splat opacity clamp; keeps 1-alpha safely invertible
COVERAGE_MIN = 1e-3  # below this accumulated alpha a pixel reports depth 0
DEPTH_EPS = 1e-4  # floor of the expected-depth normalizer
Z_NEAR = 1e-6

CHECKPOINT_MAGIC = b"MDSC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics.

    Projection: u = focal*x/z + cx, v = focal*y/z + cy, with pixel centers
    at integer coordinates.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if self.focal <= 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def look_at(cls, eye, target, up, focal, height, width):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        return cls(
            rotation=r,
            translation=-r @ eye,
            focal=focal,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            height=height,
            width=width,
        )

    def scaled(self, s):
        """Camera rendering the same field of view at 1/s resolution."""
        if s == 1.0:
            return self
        h = round(self.height / s)
        w = round(self.width / s)
        fy, fx = h / self.height, w / self.width
        return replace(
            self,
            focal=self.focal * fx,
            cx=(self.cx + 0.5) * fx - 0.5,
            cy=(self.cy + 0.5) * fy - 0.5,
            height=h,
            width=w,
        )

    def to_text(self):
        """Whitespace-separated: 3x4 row-major pose, focal, cx cy, H W."""
        pose = np.hstack([self.rotation, self.translation[:, None]])
        nums = [f"{v!r}" for v in pose.reshape(-1)]
        nums += [f"{self.focal!r}", f"{self.cx!r}", f"{self.cy!r}"]
        nums += [str(self.height), str(self.width)]
        return " ".join(nums) + "\n"

    @classmethod
    def from_text(cls, text):
        vals = text.split()
        if len(vals) != 17:
            raise ValueError(f"camera text needs 17 fields, got {len(vals)}")
        pose = np.array([float(v) for v in vals[:12]], dtype=np.float64).reshape(3, 4)
        return cls(
            rotation=pose[:, :3],
            translation=pose[:, 3],
            focal=float(vals[12]),
            cx=float(vals[13]),
            cy=float(vals[14]),
            height=int(vals[15]),
            width=int(vals[16]),
        )


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-5, 1.0 - 1e-5)
    return np.log(p / (1.0 - p))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class SplatScene:
    """Set of isotropic splat latents (all differentiable) plus a constant
    background color."""

    def __init__(self, positions, log_radius, color_logit, opacity_logit, background):
        self.positions = Tensor(positions, requires_grad=True)
        self.log_radius = Tensor(log_radius, requires_grad=True)
        self.color_logit = Tensor(color_logit, requires_grad=True)
        self.opacity_logit = Tensor(opacity_logit, requires_grad=True)
        self.background = np.asarray(background, dtype=np.float32).reshape(3)
        n = self.positions.data.shape[0]
        if n == 0:
            raise ValueError("scene needs at least one splat")
        if self.positions.data.shape != (n, 3):
            raise ValueError("positions must be [N,3]")
        if self.log_radius.data.shape != (n,):
            raise ValueError("log_radius must be [N]")
        if self.color_logit.data.shape != (n, 3):
            raise ValueError("color_logit must be [N,3]")
        if self.opacity_logit.data.shape != (n,):
            raise ValueError("opacity_logit must be [N]")

    @classmethod
    def from_points(cls, points, colors, radius, opacity, background=(1.0, 1.0, 1.0)):
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        radii = np.full(n, radius, dtype=np.float64) if np.isscalar(radius) else radius
        opac = np.full(n, opacity, dtype=np.float64) if np.isscalar(opacity) else opacity
        return cls(
            positions=points,
            log_radius=np.log(radii),
            color_logit=_logit(colors),
            opacity_logit=_logit(opac),
            background=background,
        )

    @classmethod
    def random(cls, count, rng, background=(1.0, 1.0, 1.0)):
        """Blind-run initialization: random points in the unit cube."""
        return cls.from_points(
            points=rng.uniform(-1, 1, (count, 3)),
            colors=rng.uniform(0.3, 0.7, (count, 3)),
            radius=rng.uniform(0.05, 0.15, count),
            opacity=np.full(count, 0.5),
            background=background,
        )

    @property
    def count(self):
        return self.positions.data.shape[0]

    def params(self):
        return [self.positions, self.log_radius, self.color_logit, self.opacity_logit]

    def radii(self):
        return np.exp(self.log_radius.data.astype(np.float64))

    def colors(self):
        return _sigmoid(self.color_logit.data.astype(np.float64))

    def opacities(self):
        return _sigmoid(self.opacity_logit.data.astype(np.float64))

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        """Versioned float blob; written atomically (temp file + rename)."""
        n = self.count
        blob = bytearray()
        blob += CHECKPOINT_MAGIC
        blob += struct.pack("<II", CHECKPOINT_VERSION, n)
        for arr in (
            self.positions.data,
            self.log_radius.data,
            self.color_logit.data,
            self.opacity_logit.data,
            self.background,
        ):
            blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            f.write(bytes(blob))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"not a scene checkpoint: magic {magic!r}")
            version, n = struct.unpack("<II", f.read(8))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported scene checkpoint version {version}")

            def read(count):
                raw = f.read(4 * count)
                if len(raw) != 4 * count:
                    raise ValueError("truncated scene checkpoint")
                return np.frombuffer(raw, dtype="<f4").copy()

            positions = read(3 * n).reshape(n, 3)
            log_radius = read(n)
            color_logit = read(3 * n).reshape(n, 3)
            opacity_logit = read(n)
            background = read(3)
        return cls(positions, log_radius, color_logit, opacity_logit, background)

    def to_ply(self, path):
        """ASCII point-cloud export (positions + 8-bit colors)."""
        cols = np.clip(np.rint(self.colors() * 255), 0, 255).astype(np.uint8)
        with open(path, "w") as f:
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {self.count}\n")
            f.write("property float x\nproperty float y\nproperty float z\n")
            f.write(
                "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            )
            f.write("end_header\n")
            for p, c in zip(self.positions.data, cols):
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


def load_points_ply(path):
    """Read back the positions (and colors in [0,1]) of an ASCII PLY export."""
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"not a PLY file: {path}")
        count = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError("PLY header without end_header")
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            if line.strip() == "end_header":
                break
        if count is None:
            raise ValueError("PLY header missing vertex element")
        pts = np.zeros((count, 3), dtype=np.float64)
        cols = np.zeros((count, 3), dtype=np.float64)
        for i in range(count):
            vals = f.readline().split()
            pts[i] = [float(v) for v in vals[:3]]
            cols[i] = [float(v) / 255.0 for v in vals[3:6]]
    return pts, cols


def raster_f64(pos_arr, logr_arr, clogit_arr, ologit_arr, background, cam, cutoff_sigmas=3.0):
    """Float64 forward rasterization shared by the differentiable op and by
    finite-difference verification. Returns a state dict with the output
    maps and every intermediate the backward sweep needs."""
    h, w = cam.height, cam.width
    rot = cam.rotation
    trans = cam.translation
    focal = float(cam.focal)

    pos = np.asarray(pos_arr, dtype=np.float64)
    colors = _sigmoid(np.asarray(clogit_arr, dtype=np.float64))
    opac = _sigmoid(np.asarray(ologit_arr, dtype=np.float64))
    rad = np.exp(np.asarray(logr_arr, dtype=np.float64))

    xc = pos @ rot.T + trans
    z = xc[:, 2]
    u = focal * xc[:, 0] / np.where(z > Z_NEAR, z, 1.0) + cam.cx
    v = focal * xc[:, 1] / np.where(z > Z_NEAR, z, 1.0) + cam.cy
    s_scr = rad * focal / np.where(z > Z_NEAR, z, 1.0)

    order = np.argsort(z, kind="stable")
    order = order[z[order] > Z_NEAR]

    transmit = np.ones((h, w), dtype=np.float64)
    comp = np.zeros((h, w, 3), dtype=np.float64)
    depth_sum = np.zeros((h, w), dtype=np.float64)
    alpha_sum = np.zeros((h, w), dtype=np.float64)
    touched = []  # (splat index, y0, y1, x0, x1), in compositing order

    def footprint(n):
        e = cutoff_sigmas * s_scr[n]
        y0 = max(0, int(math.floor(v[n] - e)))
        y1 = min(h - 1, int(math.ceil(v[n] + e)))
        x0 = max(0, int(math.floor(u[n] - e)))
        x1 = min(w - 1, int(math.ceil(u[n] + e)))
        if y0 > y1 or x0 > x1:
            return None
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        d2 = (ys[:, None] - v[n]) ** 2 + (xs[None, :] - u[n]) ** 2
        gauss = np.exp(-d2 / (2.0 * s_scr[n] ** 2))
        return y0, y1, x0, x1, d2, gauss

    for n in order:
        fp = footprint(n)
        if fp is None:
            continue
        y0, y1, x0, x1, _, gauss = fp
        reg = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        a = np.minimum(opac[n] * gauss, ALPHA_MAX)
        weight = a * transmit[reg]
        comp[reg] += weight[:, :, None] * colors[n]
        depth_sum[reg] += z[n] * weight
        alpha_sum[reg] += weight
        transmit[reg] = transmit[reg] * (1.0 - a)
        touched.append((n, y0, y1, x0, x1))

    bg = np.asarray(background, dtype=np.float64)
    rgb = comp + (1.0 - alpha_sum)[:, :, None] * bg
    covered = alpha_sum >= COVERAGE_MIN
    denom = np.maximum(alpha_sum, DEPTH_EPS)
    depth = np.where(covered, depth_sum / denom, 0.0)

    return {
        "rgb": rgb,
        "depth": depth,
        "alpha": alpha_sum,
        "depth_sum": depth_sum,
        "covered": covered,
        "denom": denom,
        "transmit": transmit,
        "touched": touched,
        "xc": xc,
        "z": z,
        "u": u,
        "v": v,
        "s_scr": s_scr,
        "colors": colors,
        "opac": opac,
        "rad": rad,
        "bg": bg,
        "rot": rot,
        "focal": focal,
        "shape": (h, w),
    }


def render(scene, cam, cutoff_sigmas=3.0):
    """Rasterize a scene through a camera.

    Returns (rgb [H,W,3], depth [H,W,1], alpha [H,W,1]) tensors; gradients
    flow into every splat latent. Splats behind the camera are culled;
    pixels with accumulated alpha below COVERAGE_MIN report depth 0.
    """
    state = raster_f64(
        scene.positions.data,
        scene.log_radius.data,
        scene.color_logit.data,
        scene.opacity_logit.data,
        scene.background,
        cam,
        cutoff_sigmas,
    )
    h, w = state["shape"]
    rgb, depth, alpha_sum = state["rgb"], state["depth"], state["alpha"]
    depth_sum, covered, denom = state["depth_sum"], state["covered"], state["denom"]
    transmit, touched = state["transmit"], state["touched"]
    xc, z, u, v, s_scr = state["xc"], state["z"], state["u"], state["v"], state["s_scr"]
    colors, opac, rad, bg = state["colors"], state["opac"], state["rad"], state["bg"]
    rot, focal = state["rot"], state["focal"]

    packed = np.concatenate(
        [rgb, depth[:, :, None], alpha_sum[:, :, None]], axis=2
    ).astype(np.float32)

    def backward(grad):
        g = grad.astype(np.float64)
        g_rgb = g[:, :, :3]
        g_depth = g[:, :, 3]
        g_alphaout = g[:, :, 4]

        # depth = depth_sum / max(alpha_sum, eps) on covered pixels, else 0
        g_dsum = np.where(covered, g_depth / denom, 0.0)
        g_asum = g_alphaout - (g_rgb * bg).sum(axis=2)
        g_asum += np.where(covered, -g_depth * depth_sum / denom**2, 0.0)

        grad_pos = np.zeros((scene.count, 3))
        grad_logr = np.zeros(scene.count)
        grad_clogit = np.zeros((scene.count, 3))
        grad_ologit = np.zeros(scene.count)

        rest_c = np.zeros((h, w, 3), dtype=np.float64)
        rest_d = np.zeros((h, w), dtype=np.float64)
        rest_a = np.zeros((h, w), dtype=np.float64)
        t_run = transmit.copy()

        for n, y0, y1, x0, x1 in reversed(touched):
            reg = (slice(y0, y1 + 1), slice(x0, x1 + 1))
            ys = np.arange(y0, y1 + 1, dtype=np.float64)
            xs = np.arange(x0, x1 + 1, dtype=np.float64)
            dy = ys[:, None] - v[n]
            dx = xs[None, :] - u[n]
            d2 = dy**2 + dx**2
            gauss = np.exp(-d2 / (2.0 * s_scr[n] ** 2))
            a_raw = opac[n] * gauss
            a = np.minimum(a_raw, ALPHA_MAX)
            one_minus = 1.0 - a
            t_i = t_run[reg] / one_minus
            weight = a * t_i

            grad_clogit[n] = (g_rgb[reg] * weight[:, :, None]).sum(axis=(0, 1))
            g_a = (
                g_rgb[reg] * (t_i[:, :, None] * colors[n] - rest_c[reg] / one_minus[:, :, None])
            ).sum(axis=2)
            g_a += g_dsum[reg] * (t_i * z[n] - rest_d[reg] / one_minus)
            g_a += g_asum[reg] * (t_i - rest_a[reg] / one_minus)
            g_a *= a_raw < ALPHA_MAX

            gz_direct = (g_dsum[reg] * weight).sum()

            grad_ologit[n] = (g_a * gauss).sum()
            g_gauss = g_a * opac[n] * gauss
            gu = (g_gauss * dx).sum() / s_scr[n] ** 2
            gv = (g_gauss * dy).sum() / s_scr[n] ** 2
            gs = (g_gauss * d2).sum() / s_scr[n] ** 3

            rest_c[reg] += weight[:, :, None] * colors[n]
            rest_d[reg] += weight * z[n]
            rest_a[reg] += weight
            t_run[reg] = t_i

            zn = z[n]
            gx_cam = gu * focal / zn
            gy_cam = gv * focal / zn
            gz_cam = (
                -gu * focal * xc[n, 0] / zn**2
                - gv * focal * xc[n, 1] / zn**2
                - gs * rad[n] * focal / zn**2
                + gz_direct
            )
            grad_pos[n] = rot.T @ np.array([gx_cam, gy_cam, gz_cam])
            grad_logr[n] = gs * (focal / zn) * rad[n]

        grad_clogit *= colors * (1.0 - colors)
        grad_ologit *= opac * (1.0 - opac)
        scene.positions.accum_grad(grad_pos)
        scene.log_radius.accum_grad(grad_logr)
        scene.color_logit.accum_grad(grad_clogit)
        scene.opacity_logit.accum_grad(grad_ologit)

    packed_t = Tensor._make(packed, tuple(scene.params()), backward)
    rgb_t = packed_t[:, :, 0:3]
    depth_t = packed_t[:, :, 3:4]
    alpha_t = packed_t[:, :, 4:5]
    return rgb_t, depth_t, alpha_t


def render_planes(scene, cam, cutoff_sigmas=3.0):
    """Forward-only render returning ImagePlanes (rgb, depth, alpha)."""
    with no_grad():
        rgb, depth, alpha = render(scene, cam, cutoff_sigmas)
    return ImagePlane(rgb.data), ImagePlane(depth.data), ImagePlane(alpha.data)
