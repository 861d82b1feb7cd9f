"""Frequency positional encoding with an explicit reverse pass."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError


@dataclass(frozen=True)
class PeSpec:
    num_freqs: int
    include_input: bool = True

    def __post_init__(self):
        if self.num_freqs < 0:
            raise ValueError(f"num_freqs must be >= 0, got {self.num_freqs}")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.num_freqs + int(self.include_input))


def positional_encode(x: torch.Tensor, spec: PeSpec) -> torch.Tensor:
    """Encode the last axis of ``x``.

    Each input channel expands to ``(x, sin(x), cos(x), sin(2x), cos(2x), ...)``
    and channel blocks are laid out in input order, so for input ``(..., D)``
    the output is ``(..., D * (2L + include_input))``.
    """
    if not torch.isfinite(x).all():
        raise InvalidInputError("positional_encode received non-finite input")
    L = spec.num_freqs
    freqs = 2.0 ** torch.arange(L, dtype=x.dtype, device=x.device)
    scaled = x.unsqueeze(-1) * freqs  # (..., D, L)
    sc = torch.stack([torch.sin(scaled), torch.cos(scaled)], dim=-1).flatten(-2)  # (..., D, 2L)
    if spec.include_input:
        sc = torch.cat([x.unsqueeze(-1), sc], dim=-1)
    return sc.flatten(-2)


def positional_encode_backward(x: torch.Tensor, spec: PeSpec, grad_out: torch.Tensor) -> torch.Tensor:
    """Vector-Jacobian product of :func:`positional_encode` at ``x``."""
    L = spec.num_freqs
    D = x.shape[-1]
    width = 2 * L + int(spec.include_input)
    if grad_out.shape[-1] != D * width:
        raise InvalidInputError(
            f"grad_out last dim {grad_out.shape[-1]} != expected {D * width}"
        )
    g = grad_out.reshape(*grad_out.shape[:-1], D, width)
    freqs = 2.0 ** torch.arange(L, dtype=x.dtype, device=x.device)
    scaled = x.unsqueeze(-1) * freqs
    off = int(spec.include_input)
    g_sin = g[..., off::2]
    g_cos = g[..., off + 1 :: 2]
    dx = ((g_sin * torch.cos(scaled) - g_cos * torch.sin(scaled)) * freqs).sum(-1)
    if spec.include_input:
        dx = dx + g[..., 0]
    return dx
