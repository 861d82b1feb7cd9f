"""Training loop: ray batching, losses, progressive upscaling, half-precision phase, checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .datasets import Dataset, atomic_write_bytes, atomic_write_text, frustum_bbox
from .errors import InvalidInputError, NumericalError
from .losses import (
    LossBreakdown,
    all_points_grad,
    all_points_loss,
    bg_entropy_grad,
    bg_entropy_loss,
    photometric_grad,
    photometric_loss,
)
from .metrics import psnr
from .model import DynamicField
from .optim import adam_step, lr_schedule, make_groups
from .renderer import generate_rays, render_backward, render_image, render_rays

log = logging.getLogger(__name__)

LOG_HEADER = ["iter", "photo", "all_pts", "bg_entropy", "total", "lr_voxels", "psnr_eval"]


@dataclass
class RayPool:
    """Every training pixel as a ray with its time stamp and target color."""

    origins: torch.Tensor
    dirs: torch.Tensor
    times: torch.Tensor
    colors: torch.Tensor

    @classmethod
    def from_frames(cls, frames, dtype=torch.float32):
        o, d, t, c = [], [], [], []
        for fr in frames:
            fo, fd = generate_rays(fr.camera, dtype)
            o.append(fo)
            d.append(fd)
            t.append(torch.full((fo.shape[0],), fr.time, dtype=dtype))
            c.append(torch.as_tensor(fr.image.reshape(-1, 3), dtype=dtype))
        return cls(torch.cat(o), torch.cat(d), torch.cat(t), torch.cat(c))

    def __len__(self):
        return self.origins.shape[0]


def loss_and_backward(model, origins, dirs, times, target, config: TrainConfig, backward=True, step=None):
    """Render a batch, evaluate the three losses and (optionally) backprop them."""
    res = render_rays(model, origins, dirs, times, config.alpha_threshold, config.background, step=step)
    target = target.to(model.dtype)
    valid = torch.zeros_like(res.comp.weights, dtype=torch.bool)
    mask = res.records.samples.mask
    evaluated = torch.zeros(mask.sum(), dtype=torch.bool)
    evaluated[res.records.rows] = True
    valid[mask] = evaluated
    photo = photometric_loss(res.rgb, target)
    all_pts = all_points_loss(res.comp.weights, res.sample_rgb, target, valid)
    bg = bg_entropy_loss(res.t_last)
    total = photo + config.lambda_all * all_pts + config.lambda_bg * bg
    breakdown = LossBreakdown(float(photo), float(all_pts), float(bg), float(total))
    if backward:
        d_rgb = photometric_grad(res.rgb, target)
        d_w, d_srgb = all_points_grad(res.comp.weights, res.sample_rgb, target, valid)
        d_t = config.lambda_bg * bg_entropy_grad(res.t_last)
        render_backward(model, res, d_rgb, d_t, config.lambda_all * d_w, config.lambda_all * d_srgb)
    return breakdown, res


def scene_bbox(config: TrainConfig, dataset: Dataset) -> tuple:
    if config.bbox is not None:
        return config.bbox
    if dataset.bbox is not None:
        return dataset.bbox
    return frustum_bbox(dataset["train"], dataset.near, dataset.far)


def evaluate_psnr(model, frames, config, chunk=None) -> float:
    if not frames:
        return float("nan")
    vals = []
    for fr in frames:
        img = render_image(model, fr.camera, fr.time, chunk or config.eval_chunk, config.alpha_threshold,
                           config.background)
        vals.append(psnr(img.double().clamp(0, 1).numpy(), fr.image))
    return float(np.mean(vals))


@dataclass
class TrainResult:
    model: DynamicField
    rows: list = field(default_factory=list)
    groups: dict = None
    iteration: int = 0
    seconds: float = 0.0


def _dump_batch(out_dir, it, batch):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nan_batch_{it:06d}.pt"
    buf = io.BytesIO()
    torch.save(batch, buf)
    atomic_write_bytes(path, buf.getvalue())
    return path


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r[0]] + [repr(v) if isinstance(v, float) else v for v in r[1:]])
    return buf.getvalue()


def read_log(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        for rec in rd:
            rows.append([int(rec[0])] + [float(v) if v else "" for v in rec[1:]])
    return rows


def train(config: TrainConfig, dataset: Dataset, out_dir=None, resume: Checkpoint = None,
          stop_at: int = None, progress_every: int = 100) -> TrainResult:
    """Run the optimization from scratch or from ``resume``.

    Checkpoints and ``loss.csv`` go to ``out_dir`` (when given) every
    ``config.checkpoint_every`` iterations and at the end.  ``stop_at`` ends the
    run early at that iteration count (used to produce mid-run checkpoints).
    """
    t_start = time.perf_counter()
    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        model, start = resume.model, resume.iteration
        groups = resume.groups or make_groups(config)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        rows = []
        if out_dir is not None and (out_dir / "loss.csv").exists():
            rows = [r for r in read_log(out_dir / "loss.csv") if r[0] < start]
    else:
        model = DynamicField(config, bbox=scene_bbox(config, dataset))
        groups = make_groups(config)
        rng = np.random.default_rng(config.seed)
        start, rows = 0, []
    if config.total_iters == 0:
        return TrainResult(model, rows, groups, 0, 0.0)

    pool = RayPool.from_frames(dataset["train"], dtype)
    end = config.total_iters if stop_at is None else min(stop_at, config.total_iters)
    half_from = config.total_iters - config.half_precision_last if config.half_precision_last else None
    val = dataset["val"]

    def checkpoint(it_done):
        if out_dir is None:
            return
        save_checkpoint(model, out_dir / f"ckpt_{it_done:06d}.tnv", it_done, groups, rng.bit_generator.state)
        save_checkpoint(model, out_dir / "last.tnv", it_done, groups, rng.bit_generator.state)
        atomic_write_text(out_dir / "loss.csv", rows_to_csv(rows))

    for it in range(start, end):
        if it in config.upscale_iters and model.grid.resolution != tuple(config.resolution):
            model.upscale()
            groups["voxels"].reset()
        if half_from is not None and it >= half_from and not model.grid.is_half:
            model.to_half()
        idx = torch.from_numpy(rng.integers(0, len(pool), size=config.batch_rays))
        batch = (pool.origins[idx], pool.dirs[idx], pool.times[idx], pool.colors[idx])
        try:
            loss, _ = loss_and_backward(model, *batch, config)
        except InvalidInputError as exc:
            # non-finite activations trip the encoders' input checks mid-forward
            dump = _dump_batch(out_dir, it, {"idx": idx, "batch": batch, "error": str(exc)})
            raise NumericalError(f"non-finite values at iteration {it}: {exc}", dump_path=dump) from exc
        if not math.isfinite(loss.total):
            dump = _dump_batch(out_dir, it, {"idx": idx, "batch": batch, "loss": loss})
            raise NumericalError(f"non-finite loss at iteration {it}", dump_path=dump)
        lr_factor = lr_schedule(1.0, it, config.total_iters, config.lr_decay)
        params = model.param_groups()
        for gid, group in groups.items():
            adam_step(group, params[gid], group.base_lr * lr_factor)
        done = it + 1
        ev = ""
        if (config.eval_every and done % config.eval_every == 0) or done == config.total_iters:
            ev = evaluate_psnr(model, val, config)
        rows.append([it, loss.photo, loss.all_pts, loss.bg_entropy, loss.total,
                     config.lr_voxels * lr_factor, ev])
        if progress_every and done % progress_every == 0:
            log.info("iter %d loss %.5f photo %.5f res %s", done, loss.total, loss.photo, model.grid.resolution)
        if done % config.checkpoint_every == 0 or done == end:
            checkpoint(done)
    return TrainResult(model, rows, groups, end, time.perf_counter() - t_start)
