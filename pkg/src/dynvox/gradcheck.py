"""Central finite-difference check of every analytic gradient of the total loss.

The check runs in double precision on a deliberately small model so every
parameter entry can be perturbed individually.  All parameters are randomized,
including the zero-initialized output layers, so no path is trivially zero.
Seeds whose ReLU pre-activations or deformation clamps sit within ``KINK_TOL``
of a kink are skipped, since a central difference straddling a kink is not a
derivative.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from .config import TrainConfig
from .mlp import Mlp, linear_forward
from .model import DynamicField
from .trainer import loss_and_backward

KINK_TOL = 1e-3
FD_STEP = 1e-5
REL_FLOOR = 1e-6
REL_TOL = 1e-4


def gradcheck_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(
        resolution=(8, 8, 8),
        voxel_channels=2,
        hidden=16,
        strides=(1, 2, 4),
        bbox=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0),
        alpha_threshold=0.0,
        lambda_all=0.1,
        lambda_bg=0.05,
        dtype="float64",
        seed=seed,
        total_iters=1,
        upscale_iters=(),
        half_precision_last=0,
        checkpoint_every=1,
    )


@dataclass
class GradcheckBatch:
    origins: torch.Tensor
    dirs: torch.Tensor
    times: torch.Tensor
    target: torch.Tensor
    step: float = 0.5


def make_batch(seed: int, rays: int = 6) -> GradcheckBatch:
    """Axis-aligned rays crossing the [-1, 1] box; with step 0.5 each gets 4 samples."""
    g = torch.Generator().manual_seed(seed + 1)
    uv = torch.rand((rays, 2), generator=g, dtype=torch.float64) * 1.6 - 0.8
    origins = torch.zeros((rays, 3), dtype=torch.float64)
    dirs = torch.zeros((rays, 3), dtype=torch.float64)
    for r in range(rays):
        axis = r % 3
        others = [a for a in range(3) if a != axis]
        sign = 1.0 if r % 2 == 0 else -1.0
        origins[r, axis] = -3.0 * sign
        origins[r, others] = uv[r]
        dirs[r, axis] = sign
    times = torch.tensor([0.2, 0.7] * ((rays + 1) // 2), dtype=torch.float64)[:rays]
    target = torch.rand((rays, 3), generator=g, dtype=torch.float64)
    return GradcheckBatch(origins, dirs, times, target)


def randomize(model: DynamicField, seed: int):
    g = torch.Generator().manual_seed(seed + 2)
    grid = model.grid
    grid.data = (torch.rand(grid.data.shape, generator=g, dtype=torch.float64) * 2 - 1).contiguous()
    for _, layer in model.named_layers():
        bound = 1.0 / layer.in_dim**0.5
        layer.weight = (torch.rand(layer.weight.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound * 1.5
        layer.bias = (torch.rand(layer.bias.shape, generator=g, dtype=torch.float64) * 2 - 1) * 0.3
    # a mild deformation keeps points inside the box away from the clamp
    last = model.deform_net.mlp.layers[-1]
    last.weight *= 0.1
    last.bias *= 0.1
    model.zero_grad()


def _mlp_margin(mlp: Mlp, cache) -> float:
    m = float("inf")
    for i, (layer, act) in enumerate(zip(mlp.layers, mlp.relu)):
        if act:
            pre = linear_forward(layer, cache[i])
            if pre.numel():
                m = min(m, float(pre.abs().min()))
    return m


def kink_margin(model, res, batch) -> float:
    """Smallest distance of the forward pass to a non-differentiable point."""
    rec = res.records
    margins = [
        _mlp_margin(model.time_net.mlp, rec.time_cache),
        _mlp_margin(model.deform_net.mlp, rec.deform_cache),
        _mlp_margin(model.radiance_net.trunk, rec.rad_cache[0]),
    ]
    if rec.color_cache is not None:
        margins.append(_mlp_margin(model.radiance_net.color, rec.color_cache))
    lo = torch.tensor(model.bbox_min, dtype=torch.float64)
    hi = torch.tensor(model.bbox_max, dtype=torch.float64)
    moved = rec.deformed  # clamped; distance of clamped coords to the walls
    margins.append(float(torch.minimum(moved - lo, hi - moved).min()))
    return min(margins)


def _entries(model):
    """Yield ``(name, tensor)`` for every parameter tensor, grid first."""
    yield "grid", model.grid.data
    for name, layer in model.named_layers():
        yield f"{name}.weight", layer.weight
        yield f"{name}.bias", layer.bias


def _grads(model):
    out = {"grid": model.grid.grad.clone()}
    for name, layer in model.named_layers():
        out[f"{name}.weight"] = layer.grad_weight.clone()
        out[f"{name}.bias"] = layer.grad_bias.clone()
    return out


@dataclass
class GradcheckReport:
    seed: int
    num_params: int
    max_rel_error: float
    worst: str
    seconds: float
    skipped_seeds: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < REL_TOL


def build(seed: int, overrides: str = None, max_tries: int = 50):
    """Seeded model and batch, advancing the seed past kink-adjacent draws.

    ``overrides`` is config text applied on top of :func:`gradcheck_config`.
    """
    for k in range(max_tries):
        s = seed + 1000 * k
        config = gradcheck_config(s)
        if overrides:
            config = TrainConfig.from_text(overrides, base=config)
        model = DynamicField(config, resolution=config.resolution)
        randomize(model, s)
        batch = make_batch(s)
        _, res = loss_and_backward(model, batch.origins, batch.dirs, batch.times, batch.target, config,
                                   backward=False, step=batch.step)
        if kink_margin(model, res, batch) > KINK_TOL:
            return config, model, batch, k
    raise RuntimeError(f"no kink-free draw within {max_tries} seeds from {seed}")


def run_gradcheck(seed: int = 0, h: float = FD_STEP, overrides: str = None) -> GradcheckReport:
    t0 = time.perf_counter()
    config, model, batch, skipped = build(seed, overrides)

    def loss():
        b, _ = loss_and_backward(model, batch.origins, batch.dirs, batch.times, batch.target, config,
                                 backward=False, step=batch.step)
        return b.total

    model.zero_grad()
    loss_and_backward(model, batch.origins, batch.dirs, batch.times, batch.target, config, step=batch.step)
    analytic = _grads(model)
    worst, worst_name, n = 0.0, "", 0
    for name, tensor in _entries(model):
        flat = tensor.view(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            fp = loss()
            flat[i] = orig - h
            fm = loss()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            a = float(a_flat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), REL_FLOOR)
            n += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    return GradcheckReport(seed, n, worst, worst_name, time.perf_counter() - t0, skipped)
