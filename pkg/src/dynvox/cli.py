"""Command-line entry point: ``dynvox {synth,train,render,eval,gradcheck,diag}``.

Exit codes: 0 ok, 2 usage/config/input error, 3 numerical abort, 4 state error.
``TNV_THREADS`` fixes the torch worker count (default 1, which keeps runs
bitwise reproducible).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import TrainConfig, base_config, small_config, tiny_config
from .datasets import SceneSpec, atomic_write_text, load_dnerf, look_at, synth_scene, write_png
from .encoding import positional_encode
from .errors import DynvoxError, EmptyGradientError, NumericalError
from .gradcheck import REL_TOL, run_gradcheck
from .metrics import eval_report, psnr, ssim
from .renderer import Camera, render_image
from .trainer import RayPool, loss_and_backward, train
from .voxels import grad_magnitude_per_stride

log = logging.getLogger("dynvox")

PRESETS = {"tiny": tiny_config, "small": small_config, "base": base_config}
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_STATE = 0, 2, 3, 4


class UsageError(DynvoxError):
    pass


def _resolution(text: str) -> tuple:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def parse_time_range(text: str) -> list:
    """``start:end:steps`` inclusive of both ends; ``steps`` >= 1."""
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"time range must be start:end:steps, got {text!r}")
    try:
        t0, t1, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad time range {text!r}") from None
    if n < 1 or not (0 <= t0 <= 1 and 0 <= t1 <= 1):
        raise argparse.ArgumentTypeError("times must lie in [0, 1] with at least one step")
    if n == 1:
        return [t0]
    return [float(v) for v in np.linspace(t0, t1, n)]


def _load_config(args) -> TrainConfig:
    base = PRESETS[args.preset]()
    if args.config:
        return TrainConfig.load(args.config, base)
    return base


# -- subcommands -------------------------------------------------------------
def cmd_synth(args) -> int:
    spec = SceneSpec.load(args.spec)
    synth_scene(spec, args.out, cameras=args.cameras, resolution=args.res, seed=args.seed)
    print(f"wrote dataset to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    dataset = load_dnerf(args.data, background=config.background)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.model.config.digest() != config.digest():
        raise UsageError("resume checkpoint was written with a different config")
    out = Path(args.out)
    result = train(config, dataset, out_dir=out, resume=resume)
    rows = _evaluate(result.model, dataset["val"], config)
    if rows:
        atomic_write_text(out / "eval_val.csv", eval_report(rows))
        print(f"val psnr {np.mean([r[1] for r in rows]):.3f} ssim {np.mean([r[2] for r in rows]):.4f}")
    print(f"trained {result.iteration} iterations in {result.seconds:.1f}s -> {out}")
    return EXIT_OK


def _evaluate(model, frames, config) -> list:
    rows = []
    for fr in frames:
        img = render_image(model, fr.camera, fr.time, config.eval_chunk, config.alpha_threshold, config.background)
        img = img.double().clamp(0, 1).numpy()
        rows.append((fr.name, psnr(img, fr.image), ssim(img, fr.image)))
    return rows


def _orbit_poses(n: int, radius: float, elevation: float) -> list:
    poses = []
    for k in range(n):
        az = 2 * math.pi * k / n
        pos = [radius * math.cos(elevation) * math.cos(az), radius * math.cos(elevation) * math.sin(az),
               radius * math.sin(elevation)]
        poses.append(look_at(pos))
    return poses


def _pose_file(path) -> tuple:
    """A bare 4x4 matrix, a list of them, or a transforms-style JSON."""
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read pose file {path}: {exc}") from None
    angle = None
    if isinstance(obj, dict):
        angle = obj.get("camera_angle_x")
        obj = [fr["transform_matrix"] for fr in obj.get("frames", [])]
    arr = np.asarray(obj, dtype=np.float64)
    if arr.shape == (4, 4):
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (4, 4) or arr.shape[0] == 0:
        raise UsageError(f"pose file {path} must hold 4x4 matrices")
    return list(arr), angle


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model, config = ckpt.model, ckpt.model.config
    W, H = args.res
    angle = args.fov
    if args.pose:
        poses, file_angle = _pose_file(args.pose)
        angle = file_angle if file_angle is not None and args.fov is None else angle
    else:
        poses = _orbit_poses(args.orbit, args.radius, args.elevation)
    angle = 0.6 if angle is None else angle
    focal = 0.5 * W / math.tan(0.5 * angle)
    out = Path(args.out)
    for i, pose in enumerate(poses):
        cam = Camera(pose, focal, H, W)
        for j, t in enumerate(args.time):
            img = render_image(model, cam, t, config.eval_chunk, config.alpha_threshold, config.background)
            write_png(out / f"frame_{i:03d}_{j:03d}.png", img.double().clamp(0, 1).numpy())
    print(f"rendered {len(poses) * len(args.time)} frames to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.model.config
    dataset = load_dnerf(args.data, background=config.background, splits=(args.split,))
    frames = dataset[args.split]
    if not frames:
        raise UsageError(f"split {args.split!r} is empty")
    rows = _evaluate(ckpt.model, frames, config)
    atomic_write_text(args.out, eval_report(rows))
    print(f"{args.split}: psnr {np.mean([r[1] for r in rows]):.3f} ssim {np.mean([r[2] for r in rows]):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    overrides = None
    if args.config:
        try:
            overrides = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    rep = run_gradcheck(args.seed, overrides=overrides)
    print(f"checked {rep.num_params} parameters in {rep.seconds:.1f}s; max relative error "
          f"{rep.max_rel_error:.3e} at {rep.worst}")
    if not rep.ok:
        print(f"FAIL: relative error exceeds {REL_TOL}", file=sys.stderr)
        return 1
    return EXIT_OK


def cmd_diag(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model, config = ckpt.model, ckpt.model.config
    model.grid.track_stride_grads = True
    if ckpt.iteration > 0:
        if not args.data:
            raise UsageError("diag needs --data to measure gradients of a trained checkpoint")
        dataset = load_dnerf(args.data, background=config.background, splits=("train",))
        pool = RayPool.from_frames(dataset["train"], model.dtype)
        rng = np.random.default_rng(args.seed)
        idx = torch.from_numpy(rng.integers(0, len(pool), size=min(args.rays, len(pool))))
        loss_and_backward(model, pool.origins[idx], pool.dirs[idx], pool.times[idx], pool.colors[idx], config)
    # an untrained checkpoint has never seen a backward pass: this raises
    mags = grad_magnitude_per_stride(model.grid)
    out = Path(args.out)
    lines = ["stride,norm,max"]
    for s, rec in mags.items():
        fld = rec["field"].double()
        lines.append(f"{s},{rec['norm']:.9e},{float(fld.max()):.9e}")
        img = fld.amax(dim=2).numpy()  # max projection along z
        img = img / img.max() if img.max() > 0 else img
        write_png(out / f"grad_stride{s}.png", np.repeat(img[..., None], 3, axis=2))
    atomic_write_text(out / "grad_magnitudes.csv", "\n".join(lines) + "\n")
    atomic_write_text(out / "deformation.csv", _deformation_dump(model, args.samples))
    print(f"wrote diagnostics to {out}")
    return EXIT_OK


def _deformation_dump(model, n: int) -> str:
    lo = torch.tensor(model.bbox_min, dtype=model.dtype)
    hi = torch.tensor(model.bbox_max, dtype=model.dtype)
    ax = [torch.linspace(0, 1, n, dtype=model.dtype)] * 3
    g = torch.stack(torch.meshgrid(*ax, indexing="ij"), -1).reshape(-1, 3)
    pts = lo + g * (hi - lo)
    xyz_enc = positional_encode(model.normalize(pts), model.xyz_pe)
    lines = ["t,x,y,z,dx,dy,dz"]
    for t in (0.0, 0.5, 1.0):
        emb, _ = model.time_net.forward(torch.tensor([t], dtype=model.dtype))
        off, _ = model.deform_net.forward(xyz_enc, emb.expand(pts.shape[0], -1))
        for p, d in zip(pts.tolist(), off.tolist()):
            lines.append(",".join(f"{v:.6g}" for v in [t, *p, *d]))
    return "\n".join(lines) + "\n"


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynvox", description="Dynamic radiance fields on time-aware neural voxels")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render an analytic scene spec into a dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cameras", type=int, default=20)
    p.add_argument("--res", type=_resolution, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key = value overrides on top of --preset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames over a time range")
    p.add_argument("--ckpt", required=True)
    cams = p.add_mutually_exclusive_group(required=True)
    cams.add_argument("--pose", help="JSON with a 4x4 pose, a list of poses or transforms-style frames")
    cams.add_argument("--orbit", type=int, help="number of cameras on a circle around the scene")
    p.add_argument("--time", type=parse_time_range, default=[0.0], help="start:end:steps (inclusive)")
    p.add_argument("--out", required=True)
    p.add_argument("--res", type=_resolution, default=(64, 64))
    p.add_argument("--fov", type=float, default=None, help="horizontal field of view in radians (default 0.6)")
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--elevation", type=float, default=0.3)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM report on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    p.add_argument("--config", help="key = value overrides on the gradcheck model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("diag", help="per-stride voxel gradient magnitudes and a deformation dump")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset whose training rays drive the gradient measurement")
    p.add_argument("--rays", type=int, default=4096)
    p.add_argument("--samples", type=int, default=8, help="deformation lattice points per axis")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diag)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("TNV_THREADS", "1")
    try:
        torch.set_num_threads(max(1, int(threads)))
    except ValueError:
        print(f"error: TNV_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        if exc.dump_path:
            print(f"offending batch written to {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except EmptyGradientError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except DynvoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
