"""Image containers, area resampling, PNG/PFM I/O, and quality metrics.

Conventions: images are row-major [H,W,C] float32 with C in {1,3}. RGB
lives in [0,1] but is clamped only at I/O boundaries; depth maps are in
scene units with 0 marking no coverage; variance maps are blur standard
deviations in pixel units.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image

from .tensorgrad import Tensor, absolute, tsum, window_filter2d

# Standard SSIM hyperparameters (11x11 Gaussian window, sigma 1.5).
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class ImagePlane:
    """H x W x C float32 image. 2-D input is promoted to a single channel."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"ImagePlane needs [H,W,1|3] data, got shape {arr.shape}")
        self.data = arr

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def gray(self):
        """Luma-weighted single-channel view (0.299/0.587/0.114)."""
        if self.channels == 1:
            return ImagePlane(self.data.copy())
        return ImagePlane(self.data @ LUMA_WEIGHTS)

    def clone(self):
        return ImagePlane(self.data.copy())

    def __repr__(self):
        return f"ImagePlane({self.height}x{self.width}x{self.channels})"


def _plane_array(img):
    """Accept ImagePlane, Tensor, or ndarray; return the [H,W,C] ndarray."""
    if isinstance(img, ImagePlane):
        return img.data
    if isinstance(img, Tensor):
        return img.data
    return ImagePlane(img).data


def to_tensor(img, requires_grad=False):
    if isinstance(img, Tensor):
        return img
    return Tensor(_plane_array(img), requires_grad=requires_grad)


# -- resampling ---------------------------------------------------------------


def _area_weights(n_in, n_out):
    """Row-stochastic [n_out, n_in] matrix of interval-overlap weights."""
    ratio = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        lo = o * ratio
        hi = (o + 1) * ratio
        for i in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            w[o, i] = min(hi, i + 1) - max(lo, i)
    return w / ratio


def downsample(img, s):
    """Area-average resampling by factor ``s`` >= 1.

    Output dims are round(dim/s); exact block averaging when s divides the
    input dims, so constants and global means are preserved.
    """
    arr = _plane_array(img)
    if s < 1:
        raise ValueError(f"downsample factor must be >= 1, got {s}")
    h, w = arr.shape[:2]
    ho, wo = round(h / s), round(w / s)
    if ho < 4 or wo < 4:
        raise ValueError(f"downsample output {ho}x{wo} is below the 4x4 minimum")
    wy = _area_weights(h, ho)
    wx = _area_weights(w, wo)
    out = np.einsum("oi,ijc->ojc", wy, arr.astype(np.float64))
    out = np.einsum("pj,ojc->opc", wx, out)
    return ImagePlane(out.astype(np.float32))


# -- metrics ------------------------------------------------------------------


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def psnr(a, b):
    """Peak signal-to-noise ratio in dB against a 1.0 peak; +inf when equal."""
    da, db = _plane_array(a), _plane_array(b)
    _check_same_shape(da, db, "psnr")
    mse = float(np.mean((da.astype(np.float64) - db.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def ssim_window_1d():
    g = np.exp(
        -((np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2) ** 2) / (2.0 * SSIM_SIGMA**2)
    )
    return g / g.sum()


def _filter_f64(arr, k):
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


def ssim(a, b):
    """Mean SSIM over all pixels and channels (Gaussian window, zero padding)."""
    da = _plane_array(a).astype(np.float64)
    db = _plane_array(b).astype(np.float64)
    _check_same_shape(da, db, "ssim")
    if da.shape[0] < SSIM_WINDOW or da.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"ssim needs dims >= {SSIM_WINDOW}, got {da.shape[0]}x{da.shape[1]}"
        )
    k = ssim_window_1d()
    mu_a = _filter_f64(da, k)
    mu_b = _filter_f64(db, k)
    var_a = _filter_f64(da * da, k) - mu_a * mu_a
    var_b = _filter_f64(db * db, k) - mu_b * mu_b
    cov = _filter_f64(da * db, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def d_ssim_loss(a, b):
    """Differentiable (1 - SSIM)/2 built from tape ops; 0 for identical inputs."""
    ta, tb = to_tensor(a), to_tensor(b)
    _check_same_shape(ta.data, tb.data, "d_ssim_loss")
    if ta.data.shape[0] < SSIM_WINDOW or ta.data.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"d_ssim_loss needs dims >= {SSIM_WINDOW}, "
            f"got {ta.data.shape[0]}x{ta.data.shape[1]}"
        )
    k = ssim_window_1d()
    mu_a = window_filter2d(ta, k)
    mu_b = window_filter2d(tb, k)
    var_a = window_filter2d(ta * ta, k) - mu_a * mu_a
    var_b = window_filter2d(tb * tb, k) - mu_b * mu_b
    cov = window_filter2d(ta * tb, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    from .tensorgrad import tmean

    return 0.5 * (1.0 - tmean(num / den))


def tv_loss(img):
    """Anisotropic L1 total variation: sum of |forward differences| along
    both axes, normalized by the pixel-channel count. Differentiable."""
    t = to_tensor(img)
    h, w = t.data.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"tv_loss needs dims >= 2, got {h}x{w}")
    dx = t[:, 1:, :] - t[:, :-1, :]
    dy = t[1:, :, :] - t[:-1, :, :]
    return (tsum(absolute(dx)) + tsum(absolute(dy))) * (1.0 / t.data.size)


def mean_l1_loss(a, b):
    """Differentiable mean absolute difference."""
    ta, tb = to_tensor(a), to_tensor(b)
    _check_same_shape(ta.data, tb.data, "mean_l1_loss")
    from .tensorgrad import tmean

    return tmean(absolute(ta - tb))


# -- PNG I/O --------------------------------------------------------------------


def write_png(path, img):
    """8-bit PNG; values clamped to [0,1] and quantized at this boundary."""
    arr = _plane_array(img)
    q = np.clip(np.rint(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    if q.shape[2] == 1:
        Image.fromarray(q[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(q, mode="RGB").save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            im = im.convert("L")
        elif im.mode != "RGB":
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return ImagePlane(arr)


# -- PFM I/O -------------------------------------------------------------------
# PFM: "PF"/"Pf" magic, "<width> <height>", scale line (negative scale =
# little-endian), then float32 rows stored bottom-to-top. Round-trips are
# bit-exact.


def write_pfm(path, img):
    arr = _plane_array(img)
    if arr.shape[2] == 1:
        magic = b"Pf\n"
        payload = np.flipud(arr[:, :, 0])
    else:
        magic = b"PF\n"
        payload = np.flipud(arr)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def _pfm_token(f, what):
    """Whitespace-delimited header token; errors carry the byte offset."""
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ValueError(
                f"truncated PFM header: expected {what} at byte offset {f.tell()}"
            )
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path):
    with open(path, "rb") as f:
        magic = _pfm_token(f, "magic")
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise ValueError(
                f"not a PFM file: bad magic {magic!r} at byte offset {f.tell()}"
            )
        try:
            width = int(_pfm_token(f, "width"))
            height = int(_pfm_token(f, "height"))
            scale = float(_pfm_token(f, "scale"))
        except ValueError as e:
            if "byte offset" in str(e):
                raise
            raise ValueError(
                f"malformed PFM header near byte offset {f.tell()}: {e}"
            ) from None
        if width <= 0 or height <= 0 or width * height > 10**8:
            raise ValueError(
                f"bad PFM dimensions {width}x{height} at byte offset {f.tell()}"
            )
        count = width * height * channels
        raw = f.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(
                f"truncated PFM payload: wanted {4 * count} bytes, "
                f"got {len(raw)} (file ends at byte offset {f.tell()})"
            )
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(raw, dtype=dtype).reshape(height, width, channels)
        data = np.flipud(data).astype(np.float32)
        if scale not in (-1.0, 1.0) and scale != 0:
            data = data * abs(scale)
    return ImagePlane(data)
