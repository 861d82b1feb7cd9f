"""Photometric, all-points color and background-entropy losses with their gradients.

All squared errors are channel means and every loss is averaged over rays, so
the weights on the auxiliary terms are comparable to the photometric term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError

ENTROPY_EPS = 1e-6


@dataclass
class LossBreakdown:
    photo: float
    all_pts: float
    bg_entropy: float
    total: float


def photometric_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape[0] == 0:
        raise InvalidInputError("photometric loss needs a nonempty batch")
    return ((pred - target) ** 2).mean(-1).mean()


def photometric_grad(pred, target):
    R = pred.shape[0]
    return 2 * (pred - target) / (3 * R)


def all_points_loss(weights, sample_rgb, target, valid=None) -> torch.Tensor:
    """Weighted per-sample color error, summed along rays and averaged over rays.

    ``weights`` (R, S), ``sample_rgb`` (R, S, 3), ``target`` (R, 3). Samples
    outside ``valid`` (e.g. those that skipped the color branch) are ignored.
    """
    err = ((sample_rgb - target.unsqueeze(1)) ** 2).mean(-1)
    per = weights * err
    if valid is not None:
        per = per * valid.to(per.dtype)
    return per.sum(1).mean()


def all_points_grad(weights, sample_rgb, target, valid=None):
    """Returns ``(d_weights (R, S), d_sample_rgb (R, S, 3))``."""
    R = weights.shape[0]
    diff = sample_rgb - target.unsqueeze(1)
    scale = torch.ones_like(weights) if valid is None else valid.to(weights.dtype)
    d_w = (diff**2).mean(-1) * scale / R
    d_rgb = (2.0 / (3 * R)) * (weights * scale).unsqueeze(-1) * diff
    return d_w, d_rgb


def bg_entropy_loss(t_last: torch.Tensor) -> torch.Tensor:
    t = t_last.clamp(ENTROPY_EPS, 1 - ENTROPY_EPS)
    return (-t * torch.log(t) - (1 - t) * torch.log(1 - t)).mean()


def bg_entropy_grad(t_last):
    R = t_last.shape[0]
    inside = (t_last > ENTROPY_EPS) & (t_last < 1 - ENTROPY_EPS)
    t = t_last.clamp(ENTROPY_EPS, 1 - ENTROPY_EPS)
    return torch.log((1 - t) / t) * inside.to(t.dtype) / R
