"""Desk-scale experiments shared by the acceptance suite and ``scripts/``.

Each run synthesizes (or reuses) the moving-sphere scene, measures the
untrained model, trains, and reports PSNR on every split along with the
wall-clock training time.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, tiny_config
from .datasets import SceneSpec, load_dnerf, moving_sphere_spec, synth_scene
from .model import DynamicField
from .trainer import evaluate_psnr, scene_bbox, train

log = logging.getLogger(__name__)

DESK_CAMERAS = 20
DESK_RESOLUTION = (64, 64)
TIME_BUDGET = 15 * 60.0  # seconds per training run


def desk_spec() -> SceneSpec:
    # a closer orbit makes the subject fill more of each 64x64 frame
    return moving_sphere_spec(camera_radius=3.2)


def ensure_scene(root, spec: SceneSpec = None, seed: int = 0) -> Path:
    """Synthesize the desk-scale scene into ``root`` unless it is already there."""
    root = Path(root)
    if not (root / "transforms_test.json").exists():
        synth_scene(spec or desk_spec(), root, cameras=DESK_CAMERAS, resolution=DESK_RESOLUTION, seed=seed)
    return root


def convergence_config(**kw) -> TrainConfig:
    return tiny_config(**kw)


def mdi_config(strides, **kw) -> TrainConfig:
    """64^3 variant of the tiny preset for the stride ablation.

    The finer grid halves the sampling step, so rays carry twice the points;
    half the rays per batch keeps each arm inside the time budget.
    """
    base = dict(resolution=(64, 64, 64), strides=tuple(strides), batch_rays=512)
    base.update(kw)
    return tiny_config(**base)


@dataclass
class RunReport:
    untrained_psnr: float
    psnr: dict  # split -> mean PSNR
    seconds: float
    losses: list = field(repr=False, default_factory=list)

    @property
    def heldout_psnr(self) -> float:
        return self.psnr["test"]

    def median_loss(self, lo: int, hi: int) -> float:
        return float(np.median(self.losses[lo:hi]))

    def to_json(self) -> dict:
        return {"untrained_psnr": self.untrained_psnr, "psnr": self.psnr, "seconds": self.seconds}


def run_experiment(data_root, config: TrainConfig, out_dir=None) -> RunReport:
    ds = load_dnerf(data_root, background=config.background)
    fresh = DynamicField(config, bbox=scene_bbox(config, ds))
    untrained = evaluate_psnr(fresh, ds["test"], config)
    t0 = time.perf_counter()
    res = train(config, ds, out_dir=out_dir)
    seconds = time.perf_counter() - t0
    psnr = {split: evaluate_psnr(res.model, ds[split], config) for split in ("train", "val", "test")}
    log.info("trained in %.0fs: %s (untrained %.2f dB)", seconds, psnr, untrained)
    return RunReport(untrained, psnr, seconds, [r[4] for r in res.rows])
