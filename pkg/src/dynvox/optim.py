"""Adam with per-group learning rates and a continuous exponential decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ConfigError, NumericalError
from .voxels import to_half


def lr_schedule(base_lr: float, it: int, total_iters: int, decay: float = 0.1) -> float:
    """``base_lr * decay ** (it / total)``: reaches ``decay * base_lr`` at the end."""
    if total_iters <= 0:
        raise ConfigError("total_iters must be positive for the learning-rate schedule")
    if not 0 <= it <= total_iters:
        raise ConfigError(f"iteration {it} outside [0, {total_iters}]")
    return base_lr * decay ** (it / total_iters)


@dataclass
class ParamGroup:
    """One optimizer group; ``m`` and ``v`` are keyed by parameter name."""

    id: str
    base_lr: float
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    def reset(self):
        self.m.clear()
        self.v.clear()
        self.step_count = 0


def _adam_update(group, name, param, grad, lr, t):
    b1, b2 = group.betas
    m = group.m.get(name)
    if m is None or m.shape != param.shape:
        m = torch.zeros(param.shape, dtype=grad.dtype)
        group.v[name] = torch.zeros(param.shape, dtype=grad.dtype)
    v = group.v[name]
    m.mul_(b1).add_(grad, alpha=1 - b1)
    v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    group.m[name] = m
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return lr * m_hat / (torch.sqrt(v_hat) + group.eps)


def adam_step(group: ParamGroup, params, lr: float):
    """Update ``params`` in place and zero their gradients.

    ``params`` is a list of ``(name, obj)`` pairs where ``obj`` is either a
    :class:`~dynvox.mlp.LinearLayer` or a :class:`~dynvox.voxels.VoxelGrid`.
    Half-precision grids are updated in working precision and rounded back.
    """
    tensors = []
    for name, obj in params:
        if hasattr(obj, "grad_weight"):
            tensors.append((f"{name}.weight", obj, "weight", obj.grad_weight))
            tensors.append((f"{name}.bias", obj, "bias", obj.grad_bias))
        else:
            tensors.append((name, obj, "data", obj.grad))
    for name, _, _, grad in tensors:
        if not torch.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient in group {group.id!r} ({name})", group=group.id)
    group.step_count += 1
    t = group.step_count
    for name, obj, attr, grad in tensors:
        param = getattr(obj, attr)
        if attr == "data" and obj.is_half:
            wide = obj.values()
            wide -= _adam_update(group, name, wide, grad, lr, t)
            obj.data = to_half(wide)
        else:
            param -= _adam_update(group, name, param, grad.to(param.dtype), lr, t)
    for _, obj in params:
        obj.zero_grad()


def make_groups(config) -> dict:
    betas = (config.beta1, config.beta2)
    return {
        "voxels": ParamGroup("voxels", config.lr_voxels, betas, config.adam_eps),
        "deform_net": ParamGroup("deform_net", config.lr_deform, betas, config.adam_eps),
        "other_mlps": ParamGroup("other_mlps", config.lr_other, betas, config.adam_eps),
    }
