"""Command-line entry point: synth, mask, train, render, eval, gradcheck.

Every command validates its inputs, writes into a run directory containing
exactly one manifest.json, and never mutates its inputs. Exit codes:
0 success, 2 validation error, 3 numerical divergence.

The MACRODEFOCUS_THREADS environment variable caps internal parallelism
(applied to the numerics backend before it loads), which also pins down
bit-reproducibility of training runs.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

from .errors import DivergenceError

VALIDATION_EXIT = 2
DIVERGENCE_EXIT = 3

_BOOL_FLAGS = {
    "multi_stage",
    "clarity_mask",
    "factored_net",
    "depth_input",
    "backprop_depth",
    "init_from_points",
}


def _apply_thread_cap():
    cap = os.environ.get("MACRODEFOCUS_THREADS")
    if cap:
        for var in (
            "OPENBLAS_NUM_THREADS",
            "OMP_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, cap)


def _build_id():
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if rev.returncode == 0:
            return rev.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _hash_tree(path):
    """Stable content hash of a file or of a directory's files."""
    import hashlib

    h = hashlib.sha256()
    if os.path.isfile(path):
        with open(path, "rb") as f:
            h.update(f.read())
        return h.hexdigest()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, path).encode())
            with open(full, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def _make_run_dir(out, command):
    if out:
        os.makedirs(out, exist_ok=True)
        return out
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join("runs", f"{command}-{stamp}")
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(run_dir, command, args_dict, inputs, outputs, seed=None):
    manifest = {
        "command": command,
        "config": args_dict,
        "seed": seed,
        "build_id": _build_id(),
        "input_hashes": {k: _hash_tree(v) for k, v in inputs.items() if os.path.exists(v)},
        "outputs": outputs,
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def _add_config_flags(parser):
    """One flag per TrainConfig field, defaults equal to the field defaults."""
    from .pipeline import TrainConfig
    from dataclasses import fields

    for fld in fields(TrainConfig):
        flag = "--" + fld.name.replace("_", "-")
        if fld.name in _BOOL_FLAGS:
            parser.add_argument(
                flag,
                dest=fld.name,
                action=argparse.BooleanOptionalAction,
                default=fld.default,
                help=f"{fld.name} (default: {fld.default})",
            )
        else:
            ftype = type(fld.default)
            parser.add_argument(
                flag,
                dest=fld.name,
                type=ftype,
                default=fld.default,
                help=f"{fld.name} (default: {fld.default})",
            )


def _read_config_file(path):
    """key=value lines; blank lines and #-comments ignored."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def _config_from_args(args):
    from dataclasses import fields

    from .pipeline import TrainConfig

    kwargs = {}
    for fld in fields(TrainConfig):
        kwargs[fld.name] = getattr(args, fld.name)
    return TrainConfig(**kwargs)


def _coerce_config_values(parser, raw):
    from dataclasses import fields

    from .pipeline import TrainConfig

    known = {fld.name: fld for fld in fields(TrainConfig)}
    coerced = {}
    for key, val in raw.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        default = known[key].default
        if key in _BOOL_FLAGS:
            coerced[key] = val.lower() in ("1", "true", "yes", "on")
        else:
            coerced[key] = type(default)(val)
    return coerced


# -- commands -----------------------------------------------------------------


def cmd_synth(args):
    from . import pipeline

    run_dir = _make_run_dir(args.out, "synth")
    lens = pipeline.standard_lens(edge_sigma=args.edge_sigma)
    dataset = pipeline.synth_dataset(
        shape=args.shape,
        n_views=args.views,
        lens=lens,
        noise=args.noise,
        seed=args.seed,
        resolution=args.res,
        n_splats=args.splats,
        n_heldout=args.heldout,
        kernel_k=args.kernel_k,
    )
    pipeline.save_dataset(dataset, run_dir)
    _write_manifest(
        run_dir,
        "synth",
        vars(args),
        inputs={},
        outputs=[f"view_{i:03d}" for i in range(len(dataset.views) + len(dataset.heldout))],
        seed=args.seed,
    )
    print(f"dataset with {len(dataset.views)} train / {len(dataset.heldout)} held-out "
          f"views written to {run_dir}")
    return 0


def cmd_mask(args):
    from . import clarity, imaging, pipeline

    run_dir = _make_run_dir(args.out, "mask")
    inputs = {}
    outputs = []
    images = []
    if args.dataset:
        ds = pipeline.load_dataset(args.dataset)
        inputs["dataset"] = args.dataset
        images = [(f"view_{i:03d}", v.blurry) for i, v in enumerate(ds.views + ds.heldout)]
    for path in args.image or []:
        inputs[os.path.basename(path)] = path
        name = os.path.splitext(os.path.basename(path))[0]
        images.append((name, imaging.read_png(path)))
    if not images:
        raise ValueError("mask: need --dataset or at least one --image")
    for name, img in images:
        mask = clarity.clarity_mask(img)
        out = os.path.join(run_dir, f"{name}_mask.pfm")
        imaging.write_pfm(out, mask.raw)
        outputs.append(os.path.basename(out))
    _write_manifest(run_dir, "mask", vars(args), inputs, outputs)
    print(f"{len(outputs)} clarity masks written to {run_dir}")
    return 0


def cmd_train(args, parser):
    from . import pipeline

    if args.config:
        overrides = _coerce_config_values(parser, _read_config_file(args.config))
        # command line wins over the config file: re-apply only flags the
        # user actually passed
        passed = set()
        for tok in args._cli_tokens:
            if not tok.startswith("--"):
                continue
            key = tok[2:].split("=")[0]
            if key.startswith("no-"):
                key = key[3:]
            passed.add(key.replace("-", "_"))
        for key, val in overrides.items():
            if key not in passed:
                setattr(args, key, val)
    config = _config_from_args(args)
    run_dir = _make_run_dir(args.out, "train")
    dataset = pipeline.load_dataset(args.dataset)
    print(f"training on {len(dataset.views)} views at "
          f"{dataset.resolution[0]}x{dataset.resolution[1]} -> {run_dir}")
    t0 = time.perf_counter()

    last = {"iter": -1}

    def progress(row):
        last.update(row)
        if row["iter"] % 100 == 0:
            msg = f"  iter {row['iter']:5d} [{row['stage']}] loss {row['loss']:.5f}"
            if "psnr" in row:
                msg += f" psnr {row['psnr']:.2f}"
            print(msg)

    result = pipeline.train(dataset, config, run_dir=run_dir, progress=progress)
    elapsed = time.perf_counter() - t0
    with open(os.path.join(run_dir, "timing.txt"), "w") as f:
        f.write(f"kernel_k {config.kernel_k}\n")
        f.write(f"iterations {len(result.log_rows)}\n")
        f.write(f"seconds {elapsed:.3f}\n")
        f.write(f"iters_per_sec {result.iters_per_sec:.4f}\n")
    _write_manifest(
        run_dir,
        "train",
        {k: v for k, v in vars(args).items() if k != "_cli_tokens"},
        inputs={"dataset": args.dataset},
        outputs=["scene.bin", "blurnet.bin", "log.csv", "timing.txt"],
        seed=config.seed,
    )
    print(f"done: {result.iters_per_sec:.2f} iters/s; artifacts in {run_dir}")
    return 0


def cmd_render(args):
    import math

    import numpy as np

    from . import imaging, pipeline, splatscene
    from .splatscene import SplatScene

    run_dir = _make_run_dir(args.out, "render")
    scene = SplatScene.load(args.scene)
    net = None
    if args.blurnet:
        from . import blurnet as bn

        net = bn.load_net(args.blurnet)
    inputs = {"scene": args.scene}
    if args.blurnet:
        inputs["blurnet"] = args.blurnet

    cameras = []
    if args.dataset:
        ds = pipeline.load_dataset(args.dataset)
        inputs["dataset"] = args.dataset
        cameras = [v.camera for v in ds.views + ds.heldout]
    else:
        radius = args.radius
        for k in range(args.orbit):
            angle = 2.0 * math.pi * k / args.orbit
            cameras.append(
                pipeline.ring_camera(angle, args.elevation, radius,
                                     0.5 * args.res * radius / 1.1, args.res)
            )
    outputs = []
    config = pipeline.TrainConfig()
    for i, cam in enumerate(cameras):
        rgb, depth, alpha = splatscene.render_planes(scene, cam)
        imaging.write_png(os.path.join(run_dir, f"render_{i:03d}.png"), rgb)
        imaging.write_pfm(os.path.join(run_dir, f"depth_{i:03d}.pfm"), depth)
        outputs += [f"render_{i:03d}.png", f"depth_{i:03d}.pfm"]
        if net is not None:
            from .tensorgrad import Tensor

            mask = pipeline.uniform_mask(cam.height, cam.width)
            sig = pipeline.predict_sigma(net, Tensor(rgb.data), Tensor(depth.data), mask, config)
            imaging.write_pfm(os.path.join(run_dir, f"sigma_{i:03d}.pfm"),
                              imaging.ImagePlane(sig.data))
            outputs.append(f"sigma_{i:03d}.pfm")
    _write_manifest(run_dir, "render", vars(args), inputs, outputs)
    print(f"{len(cameras)} views rendered to {run_dir}")
    return 0


def cmd_eval(args):
    import numpy as np

    from . import imaging, pipeline, splatscene
    from .splatscene import SplatScene
    from .tensorgrad import Tensor, no_grad

    run_dir = _make_run_dir(args.out, "eval")
    dataset = pipeline.load_dataset(args.dataset)
    scene = SplatScene.load(args.scene)
    net = None
    if args.blurnet:
        from . import blurnet as bn

        net = bn.load_net(args.blurnet)
    config = pipeline.TrainConfig()

    rows = []
    groups = [("train", dataset.views), ("heldout", dataset.heldout)]
    for split, views in groups:
        for i, view in enumerate(views):
            rgb, depth, _ = splatscene.render_planes(scene, view.camera)
            row = {"split": split, "view": i}
            if view.sharp is not None:
                row["psnr"] = imaging.psnr(rgb, view.sharp)
                row["ssim"] = imaging.ssim(rgb, view.sharp)
                row["psnr_blurry_input"] = imaging.psnr(view.blurry, view.sharp)
            if net is not None and view.sigma_gt is not None:
                mask = pipeline.view_mask(view, config)
                with no_grad():
                    sig = pipeline.predict_sigma(
                        net, Tensor(rgb.data), Tensor(depth.data), mask, config
                    )
                row["sigma_corr"] = pipeline.sigma_pearson(
                    sig.data, view.sigma_gt.data,
                    view.depth.data > 0 if view.depth is not None else np.ones_like(sig.data),
                )
            rows.append(row)

    cols = ["split", "view", "psnr", "ssim", "psnr_blurry_input", "sigma_corr"]
    with open(os.path.join(run_dir, "metrics.csv"), "w") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(_cell(row.get(c)) for c in cols) + "\n")
        means = {
            c: float(np.mean([r[c] for r in rows if c in r]))
            for c in cols[2:]
            if any(c in r for r in rows)
        }
        f.write(",".join(["mean", ""] + [_cell(means.get(c)) for c in cols[2:]]) + "\n")

    outputs = ["metrics.csv"]
    if net is not None and all(v.sharp is not None for v in dataset.views):
        sigmas = []
        sharps = []
        with no_grad():
            for view in dataset.views:
                rgb, depth, _ = splatscene.render_planes(scene, view.camera)
                mask = pipeline.view_mask(view, config)
                sig = pipeline.predict_sigma(
                    net, Tensor(rgb.data), Tensor(depth.data), mask, config
                )
                sigmas.append(imaging.ImagePlane(sig.data))
                sharps.append(view.sharp)
        table = pipeline.reblur_consistency(dataset, sharps, sigmas)
        with open(os.path.join(run_dir, "reblur.csv"), "w") as f:
            f.write("view,psnr,ssim,psnr_baseline\n")
            for r in table:
                f.write(
                    f"{r['view']},{_cell(r['psnr'])},{_cell(r['ssim'])},"
                    f"{_cell(r['psnr_baseline'])}\n"
                )
        outputs.append("reblur.csv")

    inputs = {"dataset": args.dataset, "scene": args.scene}
    if args.blurnet:
        inputs["blurnet"] = args.blurnet
    _write_manifest(run_dir, "eval", vars(args), inputs, outputs)
    print(f"metrics written to {run_dir}")
    return 0


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_gradcheck(args):
    from . import gradcheck

    run_dir = _make_run_dir(args.out, "gradcheck")
    lines = []

    def progress(res):
        lines.append(res.line())
        if args.verbose:
            print(res.line())

    results = gradcheck.run_all_checks(seeds=range(args.seeds), progress=progress)
    ok = all(r.ok for r in results)
    report = "\n".join(lines) + f"\n{'ALL PASS' if ok else 'FAILURES PRESENT'}\n"
    with open(os.path.join(run_dir, "gradcheck.txt"), "w") as f:
        f.write(report)
    _write_manifest(run_dir, "gradcheck", vars(args), {}, ["gradcheck.txt"])
    print(report if not args.verbose else ("ALL PASS" if ok else "FAILURES PRESENT"))
    return 0 if ok else 1


# -- parser ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="macrodefocus",
        description="Self-supervised joint defocus deblurring and splat reconstruction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blurry multi-view dataset")
    p.add_argument("--shape", default="sphere", choices=["sphere", "cube", "flat"])
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--heldout", type=int, default=4)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--splats", type=int, default=300)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--edge-sigma", type=float, default=2.5,
                   help="blur sigma in pixels at one scene unit of relative depth")
    p.add_argument("--kernel-k", type=int, default=6)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default=None)

    p = sub.add_parser("mask", help="compute clarity masks for images")
    p.add_argument("--dataset", default=None)
    p.add_argument("--image", action="append", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="run the staged joint optimization")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="key=value file; CLI flags win")
    _add_config_flags(p)

    p = sub.add_parser("render", help="render a trained scene along a camera path")
    p.add_argument("--scene", required=True)
    p.add_argument("--blurnet", default=None)
    p.add_argument("--dataset", default=None, help="reuse this dataset's cameras")
    p.add_argument("--orbit", type=int, default=12)
    p.add_argument("--radius", type=float, default=100.0)
    p.add_argument("--elevation", type=float, default=0.35)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", default=None)

    p = sub.add_parser("eval", help="PSNR/SSIM and reblur-consistency tables")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--blurnet", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every op")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", default=None)

    return parser


def main(argv=None):
    _apply_thread_cap()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._cli_tokens = argv
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "mask":
            return cmd_mask(args)
        if args.command == "train":
            return cmd_train(args, parser)
        if args.command == "render":
            return cmd_render(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        parser.error(f"unknown command {args.command}")
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return VALIDATION_EXIT
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return VALIDATION_EXIT
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return DIVERGENCE_EXIT


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
