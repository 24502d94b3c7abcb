"""Synthetic dataset generation and the three-stage joint training loop.

Datasets are produced by this package's own forward blur model: a textured
splat object in [-1,1]^3, cameras on a ring whose radius equals the lens
focal-plane depth, ground-truth sharp renders and depth maps, per-view blur
maps from the exact circle-of-confusion formula (focal depth perturbed per
view), and blurry inputs from the spatially varying blur.

Training runs in three stages: pre (scene only, against blurry targets),
low-scale joint (downsampled by ``low_scale``, one hidden layer), and
high-scale joint (full resolution, grown network). The variance network
predicts sigma in full-resolution pixel units; applying it at scale s
divides by s, which keeps the prediction target consistent across stages.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import blurnet as bn
from . import clarity, imaging, optics, splatscene, svblur
from .imaging import ImagePlane
from .splatscene import Camera, SplatScene
from .svblur import SIGMA_MIN
from .tensorgrad import AdamState, Tensor, adam_step, backward, clip_min, no_grad, zero_grads

from .errors import DivergenceError

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))

LOG_HEADER = "iter,stage,loss,l1,dssim,tv,psnr,ssim,sigma_corr"


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    """Full hyperparameter record. Iteration counts follow the reference
    schedule and are divided by ``iter_scale`` for desk-sized runs."""

    iters_pre: int = 3000
    iters_low_end: int = 15000
    iters_total: int = 30000
    iter_scale: float = 15.0
    low_scale: float = 2.0
    high_scale: float = 1.0
    kernel_k: int = 6
    freq: int = 7
    lr_cnn: float = 1e-3
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_radius: float = 5e-3
    lr_opacity: float = 2.5e-2
    dssim_weight: float = 0.2
    tv_weight: float = 1e-3
    multi_stage: bool = True
    clarity_mask: bool = True
    factored_net: bool = True
    depth_input: bool = True
    backprop_depth: bool = False
    init_from_points: bool = True
    init_noise: float = 0.05
    n_splats: int = 300
    seed: int = 1
    eval_every: int = 100
    checkpoint_every: int = 200

    def __post_init__(self):
        if not (0 < self.iters_pre < self.iters_low_end < self.iters_total):
            raise ValueError(
                "iteration boundaries must satisfy 0 < pre < low_end < total"
            )
        if self.low_scale < 1 or self.high_scale < 1:
            raise ValueError("scales must be >= 1")
        if not (0.0 <= self.dssim_weight <= 1.0):
            raise ValueError("dssim_weight must lie in [0,1]")
        if self.iter_scale <= 0:
            raise ValueError("iter_scale must be positive")

    def boundaries(self):
        """Effective (pre_end, low_end, total) after desk scaling."""
        pre = max(1, round(self.iters_pre / self.iter_scale))
        low = max(pre + 1, round(self.iters_low_end / self.iter_scale))
        total = max(low + 1, round(self.iters_total / self.iter_scale))
        return pre, low, total


# -- dataset -----------------------------------------------------------------


@dataclass
class View:
    blurry: ImagePlane
    camera: Camera
    mask: clarity.ClarityMask
    sharp: ImagePlane | None = None
    depth: ImagePlane | None = None
    sigma_gt: ImagePlane | None = None


@dataclass
class Dataset:
    views: list
    heldout: list = field(default_factory=list)
    lens: optics.LensParams | None = None
    kernel_k: int = 6
    background: tuple = (1.0, 1.0, 1.0)
    gt_points: np.ndarray | None = None
    gt_scene: SplatScene | None = None
    d0_per_view: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.views) < 3:
            raise ValueError(f"dataset needs >= 3 views, got {len(self.views)}")
        shapes = {(v.blurry.height, v.blurry.width) for v in self.views + self.heldout}
        if len(shapes) != 1:
            raise ValueError(f"views disagree on resolution: {shapes}")

    @property
    def resolution(self):
        v = self.views[0]
        return v.blurry.height, v.blurry.width


def standard_lens(edge_sigma=2.5, f=1.0, aperture=0.12, d0=100.0):
    """Lens with pixel_scale chosen so one scene unit of relative depth
    blurs by ``edge_sigma`` pixels."""
    base = optics.LensParams(f=f, A=aperture, d0=d0, pixel_scale=1.0)
    return replace(base, pixel_scale=edge_sigma / optics.alpha(base))


def _quantize(plane):
    """Round-trip through 8-bit, matching what PNG storage would do."""
    q = np.clip(np.rint(np.clip(plane.data, 0, 1) * 255.0), 0, 255) / 255.0
    return ImagePlane(q.astype(np.float32))


def _object_colors(points):
    """Deterministic high-contrast procedural texture: smooth color bands
    modulated by a coarse checker."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    bands = np.stack(
        [
            0.5 + 0.5 * np.sin(7.0 * x + 1.3),
            0.5 + 0.5 * np.sin(7.0 * y + 4.1),
            0.5 + 0.5 * np.sin(7.0 * z + 2.2),
        ],
        axis=1,
    )
    cells = np.floor(2.0 * (points + 1.0)).sum(axis=1) % 2
    return 0.12 + 0.76 * bands * (0.35 + 0.65 * cells[:, None])


def make_object(shape, n_splats, rng):
    """Test object in [-1,1]^3: (points, colors, radii, opacities)."""
    if shape == "sphere":
        i = np.arange(n_splats)
        y = 1.0 - 2.0 * (i + 0.5) / n_splats
        r = np.sqrt(np.clip(1.0 - y * y, 0.0, 1.0))
        theta = GOLDEN_ANGLE * i
        pts = 0.75 * np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)
        spacing = math.sqrt(4.0 * math.pi * 0.75**2 / n_splats)
    elif shape == "cube":
        face = rng.integers(0, 6, n_splats)
        uv = rng.uniform(-0.7, 0.7, (n_splats, 2))
        pts = np.zeros((n_splats, 3))
        axis = face % 3
        sign = np.where(face < 3, 0.7, -0.7)
        for k in range(n_splats):
            others = [a for a in range(3) if a != axis[k]]
            pts[k, axis[k]] = sign[k]
            pts[k, others[0]] = uv[k, 0]
            pts[k, others[1]] = uv[k, 1]
        spacing = math.sqrt(6.0 * 1.4**2 / n_splats)
    elif shape == "flat":
        # degenerate: a tiny cluster at the ring center, everything in focus
        pts = rng.uniform(-1e-3, 1e-3, (n_splats, 3))
        spacing = 0.08
    else:
        raise ValueError(f"unknown test scene shape {shape!r}")
    colors = _object_colors(pts)
    radii = np.full(n_splats, 0.62 * spacing)
    opac = np.full(n_splats, 0.92)
    return pts, colors, radii, opac


def ring_camera(angle, elevation, ring_radius, focal, res):
    eye = np.array(
        [
            ring_radius * math.cos(angle) * math.cos(elevation),
            ring_radius * math.sin(elevation),
            ring_radius * math.sin(angle) * math.cos(elevation),
        ]
    )
    return Camera.look_at(
        eye=eye, target=(0, 0, 0), up=(0, 1, 0), focal=focal, height=res, width=res
    )


def synth_dataset(
    shape,
    n_views,
    lens,
    noise,
    seed,
    resolution=64,
    n_splats=300,
    n_heldout=4,
    kernel_k=6,
    background=(1.0, 1.0, 1.0),
    elevation=0.35,
):
    """Generate a fully ground-truthed multi-view blurry dataset.

    Cameras sit on a ring of radius lens.d0 (3-degree steps fall out of
    n_views=120); the per-view blur map comes from the exact thin-lens
    formula with the focal depth perturbed by Normal(0, noise); blurry
    inputs are 8-bit quantized, exactly as they round-trip through PNG.
    """
    if n_views < 3:
        raise ValueError(f"need at least 3 views, got {n_views}")
    rng = np.random.default_rng(seed)
    pts, cols, radii, opac = make_object(shape, n_splats, rng)
    gt_scene = SplatScene.from_points(pts, cols, radii, opac, background)
    ring = lens.d0
    focal = 0.5 * resolution * ring / 1.1

    def build_view(angle, d0_view):
        cam = ring_camera(angle, elevation, ring, focal, resolution)
        sharp, depth, _ = splatscene.render_planes(gt_scene, cam)
        lens_view = replace(lens, d0=d0_view)
        sig = np.where(
            depth.data > 0,
            optics.coc_radius_exact(lens_view, np.maximum(depth.data, 1e-6)),
            0.0,
        )
        sigma_gt = ImagePlane(svblur.floor_sigma(sig))
        blurry = _quantize(svblur.sv_blur_forward(sharp, sigma_gt, kernel_k))
        mask = clarity.clarity_mask(blurry)
        return View(blurry, cam, mask, sharp=sharp, depth=depth, sigma_gt=sigma_gt)

    views, heldout, d0s = [], [], []
    for k in range(n_views):
        d0_view = ring + rng.normal(0.0, noise)
        d0s.append(d0_view)
        views.append(build_view(2.0 * math.pi * k / n_views, d0_view))
    for k in range(n_heldout):
        d0_view = ring + rng.normal(0.0, noise)
        d0s.append(d0_view)
        angle = 2.0 * math.pi * (k + 0.5) * (n_views // max(1, n_heldout)) / n_views
        heldout.append(build_view(angle, d0_view))

    return Dataset(
        views=views,
        heldout=heldout,
        lens=lens,
        kernel_k=kernel_k,
        background=tuple(background),
        gt_points=pts,
        gt_scene=gt_scene,
        d0_per_view=d0s,
    )


# -- dataset persistence -------------------------------------------------------
# Layout: view_###/{blurry.png, sharp.png, depth.pfm, sigma_gt.pfm, mask.pfm,
# camera.txt} plus meta.json and points.ply at the root. Held-out views are
# listed by index in meta.json.


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def save_dataset(dataset, root):
    os.makedirs(root, exist_ok=True)
    all_views = list(dataset.views) + list(dataset.heldout)
    for i, view in enumerate(all_views):
        vdir = os.path.join(root, f"view_{i:03d}")
        os.makedirs(vdir, exist_ok=True)
        imaging.write_png(os.path.join(vdir, "blurry.png"), view.blurry)
        with open(os.path.join(vdir, "camera.txt"), "w") as f:
            f.write(view.camera.to_text())
        imaging.write_pfm(os.path.join(vdir, "mask.pfm"), view.mask.raw)
        with open(os.path.join(vdir, "mask.sha256"), "w") as f:
            f.write(_sha256(os.path.join(vdir, "blurry.png")) + "\n")
        if view.sharp is not None:
            imaging.write_png(os.path.join(vdir, "sharp.png"), view.sharp)
        if view.depth is not None:
            imaging.write_pfm(os.path.join(vdir, "depth.pfm"), view.depth)
        if view.sigma_gt is not None:
            imaging.write_pfm(os.path.join(vdir, "sigma_gt.pfm"), view.sigma_gt)
    if dataset.gt_scene is not None:
        dataset.gt_scene.to_ply(os.path.join(root, "points.ply"))
    meta = {
        "n_views": len(dataset.views),
        "heldout": list(range(len(dataset.views), len(all_views))),
        "kernel_k": dataset.kernel_k,
        "background": list(dataset.background),
        "d0_per_view": [float(v) for v in dataset.d0_per_view],
    }
    if dataset.lens is not None:
        meta["lens"] = {
            "f": dataset.lens.f,
            "A": dataset.lens.A,
            "d0": dataset.lens.d0,
            "pixel_scale": dataset.lens.pixel_scale,
        }
    with open(os.path.join(root, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def _mask_views(raw_plane):
    """Rebuild the normalized and unit-scaled views from a raw mask map."""
    raw = np.clip(raw_plane.data.astype(np.float64), 0.0, None)
    total = raw.sum()
    normalized = raw / total if total > 1e-12 else np.full_like(raw, 1.0 / raw.size)
    spread = raw.max() - raw.min()
    unit = (raw - raw.min()) / spread if spread > 1e-12 else np.zeros_like(raw)
    return clarity.ClarityMask(
        raw=ImagePlane(raw.astype(np.float32)),
        normalized=ImagePlane(normalized.astype(np.float32)),
        unit_scaled=ImagePlane(unit.astype(np.float32)),
    )


def load_dataset(root):
    meta_path = os.path.join(root, "meta.json")
    if not os.path.exists(meta_path):
        raise ValueError(f"dataset at {root}: missing meta.json")
    with open(meta_path) as f:
        meta = json.load(f)
    vdirs = sorted(d for d in os.listdir(root) if d.startswith("view_"))
    all_views = []
    for d in vdirs:
        vdir = os.path.join(root, d)
        blurry_path = os.path.join(vdir, "blurry.png")
        cam_path = os.path.join(vdir, "camera.txt")
        for p in (blurry_path, cam_path):
            if not os.path.exists(p):
                raise ValueError(f"dataset view {vdir}: missing {os.path.basename(p)}")
        blurry = imaging.read_png(blurry_path)
        with open(cam_path) as f:
            cam = Camera.from_text(f.read())
        mask = _load_or_compute_mask(vdir, blurry)

        def opt_png(name):
            p = os.path.join(vdir, name)
            return imaging.read_png(p) if os.path.exists(p) else None

        def opt_pfm(name):
            p = os.path.join(vdir, name)
            return imaging.read_pfm(p) if os.path.exists(p) else None

        all_views.append(
            View(
                blurry,
                cam,
                mask,
                sharp=opt_png("sharp.png"),
                depth=opt_pfm("depth.pfm"),
                sigma_gt=opt_pfm("sigma_gt.pfm"),
            )
        )
    heldout_ids = set(meta.get("heldout", []))
    views = [v for i, v in enumerate(all_views) if i not in heldout_ids]
    heldout = [v for i, v in enumerate(all_views) if i in heldout_ids]
    lens = None
    if "lens" in meta:
        lens = optics.LensParams(**meta["lens"])
    gt_points = None
    ply = os.path.join(root, "points.ply")
    if os.path.exists(ply):
        gt_points, _ = splatscene.load_points_ply(ply)
    return Dataset(
        views=views,
        heldout=heldout,
        lens=lens,
        kernel_k=int(meta.get("kernel_k", 6)),
        background=tuple(meta.get("background", (1.0, 1.0, 1.0))),
        gt_points=gt_points,
        d0_per_view=list(meta.get("d0_per_view", [])),
    )


def _load_or_compute_mask(vdir, blurry):
    """Masks are cached beside the inputs, keyed by the input image hash."""
    mask_path = os.path.join(vdir, "mask.pfm")
    key_path = os.path.join(vdir, "mask.sha256")
    blurry_hash = _sha256(os.path.join(vdir, "blurry.png"))
    if os.path.exists(mask_path) and os.path.exists(key_path):
        with open(key_path) as f:
            if f.read().strip() == blurry_hash:
                return _mask_views(imaging.read_pfm(mask_path))
    mask = clarity.clarity_mask(blurry)
    imaging.write_pfm(mask_path, mask.raw)
    with open(key_path, "w") as f:
        f.write(blurry_hash + "\n")
    return mask


# -- losses ---------------------------------------------------------------------


def loss_pretrain(input_blurry, rendered, lam=0.2):
    """(1-lam) * mean L1 + lam * D-SSIM between the blurry target and the
    rendered image."""
    l1 = imaging.mean_l1_loss(input_blurry, rendered)
    if lam == 0.0:
        return l1 * (1.0 - lam)
    return (1.0 - lam) * l1 + lam * imaging.d_ssim_loss(input_blurry, rendered)


def loss_main(input_blurry, simulated_blurred, rendered_sharp, lam=0.2, tv_weight=1e-3):
    """Joint objective: photometric match of the re-blurred render against
    the blurry input plus total-variation smoothing of the sharp render."""
    loss, _ = _loss_main_terms(
        input_blurry, simulated_blurred, rendered_sharp, lam, tv_weight
    )
    return loss


def _loss_main_terms(input_blurry, simulated, rendered_sharp, lam, tv_weight):
    l1 = imaging.mean_l1_loss(input_blurry, simulated)
    dssim = imaging.d_ssim_loss(input_blurry, simulated)
    tv = imaging.tv_loss(rendered_sharp)
    loss = (1.0 - lam) * l1 + lam * dssim + tv_weight * tv
    return loss, {"l1": l1.item(), "dssim": dssim.item(), "tv": tv.item()}


# -- evaluation helpers ----------------------------------------------------------


def uniform_mask(h, w):
    flat = np.full((h, w, 1), 1.0 / (h * w), dtype=np.float32)
    return clarity.ClarityMask(
        raw=ImagePlane(np.full((h, w, 1), 1.0, dtype=np.float32)),
        normalized=ImagePlane(flat),
        unit_scaled=ImagePlane(np.zeros((h, w, 1), dtype=np.float32)),
    )


def view_mask(view, config, scale=1.0):
    if config.clarity_mask:
        mask = view.mask if scale == 1.0 else _mask_views(imaging.downsample(view.mask.raw, scale))
        return mask
    h, w = view.blurry.height, view.blurry.width
    if scale != 1.0:
        h, w = round(h / scale), round(w / scale)
    return uniform_mask(h, w)


def predict_sigma(net, rgb_t, depth_t, mask, config, scale=1.0):
    """Variance map at the working scale: the net predicts full-resolution
    pixel units; application at scale s divides by s (refloored)."""
    if not config.depth_input:
        depth_t = Tensor(np.zeros_like(depth_t.data))
    elif not config.backprop_depth:
        depth_t = depth_t.detach()
    sigma_full = bn.predict_variance(net, rgb_t, depth_t, mask)
    if scale == 1.0:
        return sigma_full
    return clip_min(sigma_full * (1.0 / scale), SIGMA_MIN)


def sigma_pearson(pred, gt, coverage):
    """Pearson correlation over coverage pixels; 0 when degenerate."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    m = np.asarray(coverage).reshape(-1) > 0
    if m.sum() < 2:
        return 0.0
    p, g = p[m], g[m]
    sp, sg = p.std(), g.std()
    if sp < 1e-12 or sg < 1e-12:
        return 0.0
    return float(np.corrcoef(p, g)[0, 1])


def evaluate(scene, net, views, config):
    """Full-resolution metrics against ground truth where available:
    mean PSNR/SSIM of the sharp render and mean predicted-vs-true sigma
    correlation over coverage pixels."""
    psnrs, ssims, corrs = [], [], []
    with no_grad():
        for view in views:
            rgb, depth, _ = splatscene.render(scene, view.camera)
            if view.sharp is not None:
                psnrs.append(imaging.psnr(ImagePlane(rgb.data), view.sharp))
                ssims.append(imaging.ssim(ImagePlane(rgb.data), view.sharp))
            if net is not None and view.sigma_gt is not None and view.depth is not None:
                mask = view_mask(view, config)
                sig = predict_sigma(net, rgb, depth, mask, config)
                corrs.append(
                    sigma_pearson(sig.data, view.sigma_gt.data, view.depth.data > 0)
                )
    out = {}
    if psnrs:
        out["psnr"] = float(np.mean(psnrs))
        out["ssim"] = float(np.mean(ssims))
    if corrs:
        out["sigma_corr"] = float(np.mean(corrs))
    return out


def reblur_consistency(dataset, sharp_renders, predicted_sigmas):
    """Reblur ground-truth sharp renders with recovered kernels and compare
    against the blurry inputs, per view, alongside the delta-kernel baseline."""
    rows = []
    for i, (view, sharp, sigma) in enumerate(
        zip(dataset.views, sharp_renders, predicted_sigmas)
    ):
        sig_plane = sigma.sigma if isinstance(sigma, svblur.VarianceMap) else sigma
        reblurred = svblur.sv_blur_forward(sharp, sig_plane, dataset.kernel_k)
        rows.append(
            {
                "view": i,
                "psnr": imaging.psnr(reblurred, view.blurry),
                "ssim": imaging.ssim(reblurred, view.blurry),
                "psnr_baseline": imaging.psnr(sharp, view.blurry),
            }
        )
    return rows


# -- training ----------------------------------------------------------------------


def init_scene(dataset, config, rng):
    bg = np.asarray(dataset.background, dtype=np.float64)
    if config.init_from_points and dataset.gt_points is not None:
        pts = dataset.gt_points + rng.normal(0.0, config.init_noise, dataset.gt_points.shape)
        d = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((d**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        nn = np.sort(dist, axis=1)[:, :3].mean(axis=1)
        radii = np.clip(nn, 1e-3, 0.3)
        colors = np.full((len(pts), 3), 0.5)
        return SplatScene.from_points(pts, colors, radii, 0.8, background=bg)
    scene = SplatScene.random(config.n_splats, rng, background=bg)
    return scene


def _scene_optimizers(scene, config):
    return {
        "positions": (scene.positions, AdamState(lr=config.lr_position)),
        "log_radius": (scene.log_radius, AdamState(lr=config.lr_radius)),
        "color_logit": (scene.color_logit, AdamState(lr=config.lr_color)),
        "opacity_logit": (scene.opacity_logit, AdamState(lr=config.lr_opacity)),
    }


def _position_lr(config, it, total):
    """3DGS-style exponential decay from lr_position to lr_position_final."""
    t = min(max(it / max(total, 1), 0.0), 1.0)
    return float(
        np.exp((1 - t) * np.log(config.lr_position) + t * np.log(config.lr_position_final))
    )


def _fmt(v):
    return "" if v is None else f"{v:.9g}"


@dataclass
class TrainResult:
    scene: SplatScene
    net: object
    log_rows: list
    iters_per_sec: float

    def log_csv(self):
        lines = [LOG_HEADER]
        for r in self.log_rows:
            lines.append(
                ",".join(
                    [
                        str(r["iter"]),
                        r["stage"],
                        _fmt(r["loss"]),
                        _fmt(r["l1"]),
                        _fmt(r["dssim"]),
                        _fmt(r["tv"]),
                        _fmt(r.get("psnr")),
                        _fmt(r.get("ssim")),
                        _fmt(r.get("sigma_corr")),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def _snapshot(scene, net):
    data = [p.data.copy() for p in scene.params()]
    net_data = [p.data.copy() for p in net.params()] if net is not None else None
    return data, net_data


def _restore(scene, net, snap):
    data, net_data = snap
    for p, d in zip(scene.params(), data):
        p.data = d.copy()
    if net is not None and net_data is not None and len(net_data) == len(net.params()):
        for p, d in zip(net.params(), net_data):
            p.data = d.copy()


def train(dataset, config, run_dir=None, progress=None):
    """Run the staged self-supervised optimization.

    Returns a TrainResult with the scene, the variance net, the metrics log
    (one row per iteration), and the measured iteration rate. If ``run_dir``
    is given, checkpoints and log.csv land there; on divergence the last
    good checkpoint is restored and persisted before DivergenceError.
    """
    rng = np.random.default_rng(config.seed)
    pre_end, low_end, total = config.boundaries()
    scene = init_scene(dataset, config, rng)
    scene_opts = _scene_optimizers(scene, config)

    net = None
    net_groups = []  # (params, AdamState)

    def build_net():
        if config.factored_net:
            return bn.BlurNet(rng, freq=config.freq, use_mask=config.clarity_mask)
        return bn.PlainCNN(rng, freq=config.freq, use_mask=config.clarity_mask)

    views = dataset.views
    order = []

    def next_view(it):
        nonlocal order
        if not order:
            order = list(rng.permutation(len(views)))
        return views[order.pop()]

    cache = {}

    def stage_inputs(view, scale):
        key = (id(view), scale)
        if key not in cache:
            target = view.blurry if scale == 1.0 else imaging.downsample(view.blurry, scale)
            mask = view_mask(view, config, scale)
            cache[key] = (Tensor(target.data), mask, view.camera.scaled(scale))
        return cache[key]

    log_rows = []
    snap = _snapshot(scene, net)
    eval_views = dataset.heldout if dataset.heldout else dataset.views
    t0 = time.perf_counter()

    for it in range(total):
        if it < pre_end:
            stage, scale = "pre", 1.0
        elif config.multi_stage and it < low_end:
            stage, scale = "low", config.low_scale
        else:
            stage, scale = "high", config.high_scale

        joint = stage != "pre"
        if joint and net is None:
            net = build_net()
            net_groups = [(net.params(), AdamState(lr=config.lr_cnn))]
            if stage == "high" and net.active_depth == 1:
                # single-stage run: use the full-depth net from the start
                net.grow()
                net_groups = [(net.params(), AdamState(lr=config.lr_cnn))]
        if stage == "high" and net is not None and net.active_depth == 1:
            before = set(id(p) for p in net.params())
            net.grow()
            new_params = [p for p in net.params() if id(p) not in before]
            net_groups.append((new_params, AdamState(lr=config.lr_cnn)))

        view = next_view(it)
        target_t, mask, cam = stage_inputs(view, scale)
        rgb, depth, _alpha = splatscene.render(scene, cam)

        if not joint:
            l1 = imaging.mean_l1_loss(target_t, rgb)
            dssim = imaging.d_ssim_loss(target_t, rgb)
            loss = (1.0 - config.dssim_weight) * l1 + config.dssim_weight * dssim
            parts = {"l1": l1.item(), "dssim": dssim.item(), "tv": 0.0}
        else:
            sigma = predict_sigma(net, rgb, depth, mask, config, scale)
            simulated = svblur.sv_blur(rgb, sigma, config.kernel_k)
            loss, parts = _loss_main_terms(
                target_t, simulated, rgb, config.dssim_weight, config.tv_weight
            )

        loss_val = loss.item()
        if not math.isfinite(loss_val):
            _restore(scene, net, snap)
            if run_dir is not None:
                scene.save(os.path.join(run_dir, "scene.bin"))
                if net is not None:
                    bn.save_net(net, os.path.join(run_dir, "blurnet.bin"))
            raise DivergenceError(f"non-finite loss at iteration {it}")

        backward(loss)
        scene_opts["positions"][1].lr = _position_lr(config, it, total)
        for param, state in scene_opts.values():
            adam_step([param], state)
        if joint:
            for params, state in net_groups:
                adam_step(params, state)
        zero_grads(scene.params())
        if net is not None:
            zero_grads(net.params())

        row = {
            "iter": it,
            "stage": stage,
            "loss": loss_val,
            "l1": parts["l1"],
            "dssim": parts["dssim"],
            "tv": parts["tv"],
        }
        if config.eval_every and (it % config.eval_every == config.eval_every - 1 or it == total - 1):
            row.update(evaluate(scene, net, eval_views, config))
        log_rows.append(row)
        if progress:
            progress(row)

        if it % config.checkpoint_every == config.checkpoint_every - 1:
            snap = _snapshot(scene, net)
            if run_dir is not None:
                scene.save(os.path.join(run_dir, "scene.bin"))
                if net is not None:
                    bn.save_net(net, os.path.join(run_dir, "blurnet.bin"))

    elapsed = time.perf_counter() - t0
    result = TrainResult(
        scene=scene, net=net, log_rows=log_rows, iters_per_sec=total / max(elapsed, 1e-9)
    )
    if run_dir is not None:
        scene.save(os.path.join(run_dir, "scene.bin"))
        if net is not None:
            bn.save_net(net, os.path.join(run_dir, "blurnet.bin"))
        with open(os.path.join(run_dir, "log.csv"), "w") as f:
            f.write(result.log_csv())
    return result


def dataset_mean_loss(dataset, scene, net, config):
    """Mean full-resolution joint loss over the training views (evaluation
    pass; no parameter updates)."""
    total = 0.0
    with no_grad():
        for view in dataset.views:
            rgb, depth, _ = splatscene.render(scene, view.camera)
            mask = view_mask(view, config)
            sigma = predict_sigma(net, rgb, depth, mask, config)
            simulated = svblur.sv_blur(rgb, sigma, config.kernel_k)
            loss, _ = _loss_main_terms(
                Tensor(view.blurry.data), simulated, rgb,
                config.dssim_weight, config.tv_weight,
            )
            total += loss.item()
    return total / len(dataset.views)


def gt_plugin_loss(dataset, config):
    """Joint loss with the ground-truth scene renders and ground-truth sigma
    maps plugged in: an upper-bound certificate for the training optimum."""
    if dataset.gt_scene is None:
        raise ValueError("gt_plugin_loss needs the in-memory ground-truth scene")
    total = 0.0
    with no_grad():
        for view in dataset.views:
            rgb, _, _ = splatscene.render(dataset.gt_scene, view.camera)
            simulated = svblur.sv_blur(rgb, Tensor(view.sigma_gt.data), dataset.kernel_k)
            loss, _ = _loss_main_terms(
                Tensor(view.blurry.data), simulated, rgb,
                config.dssim_weight, config.tv_weight,
            )
            total += loss.item()
    return total / len(dataset.views)
