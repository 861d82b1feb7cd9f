"""Small dense networks with hand-written forward and reverse passes.

Three networks make up the dynamic field:

* ``TimeNet``: encoded time stamp -> time embedding (2 layers).
* ``DeformNet``: encoded coordinates + time embedding -> coordinate offset (3 layers,
  last layer zero so the initial deformation is the identity).
* ``RadianceNet``: encoded voxel features, time embedding and encoded coordinates ->
  raw density, then (with the encoded view direction) raw color.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .encoding import PeSpec, positional_encode
from .errors import InvalidInputError


class LinearLayer:
    """``y = x @ W.T + b`` with W of shape (out, in)."""

    def __init__(self, in_dim, out_dim, dtype=torch.float32, generator=None, bound=None, zero=False):
        self.in_dim, self.out_dim = in_dim, out_dim
        if zero:
            self.weight = torch.zeros((out_dim, in_dim), dtype=dtype)
        else:
            if bound is None:
                bound = math.sqrt(6.0 / in_dim)
            w = torch.rand((out_dim, in_dim), generator=generator, dtype=torch.float64)
            self.weight = ((2 * w - 1) * bound).to(dtype)
        self.bias = torch.zeros(out_dim, dtype=dtype)
        self.zero_grad()

    def zero_grad(self):
        self.grad_weight = torch.zeros_like(self.weight)
        self.grad_bias = torch.zeros_like(self.bias)

    def params(self):
        return [("weight", self.weight, self.grad_weight), ("bias", self.bias, self.grad_bias)]

    def to(self, dtype):
        self.weight = self.weight.to(dtype)
        self.bias = self.bias.to(dtype)
        self.zero_grad()
        return self


# BLAS picks a different kernel for very short inputs or very narrow outputs,
# which changes low bits; padding both keeps each row's result independent of
# how many rows are batched.
_MIN_ROWS = 8


def linear_forward(layer: LinearLayer, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != layer.in_dim:
        raise InvalidInputError(f"linear layer expects {layer.in_dim} inputs, got {x.shape[-1]}")
    n = x.shape[0]
    w, b = layer.weight, layer.bias
    if layer.out_dim < _MIN_ROWS:
        pad = _MIN_ROWS - layer.out_dim
        w = torch.cat([w, w.new_zeros((pad, w.shape[1]))])
        b = torch.cat([b, b.new_zeros(pad)])
    if n < _MIN_ROWS:
        x = torch.cat([x, x.new_zeros((_MIN_ROWS - n, x.shape[1]))])
    return torch.addmm(b, x, w.T)[:n, : layer.out_dim]


def softplus(x: torch.Tensor) -> torch.Tensor:
    """``log(1 + exp(x))``, evaluated stably and elementwise-deterministically."""
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-x.abs()))


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    e = torch.exp(-x.abs())
    r = 1 / (1 + e)
    return torch.where(x >= 0, r, e * r)


def linear_backward(layer: LinearLayer, x: torch.Tensor, dy: torch.Tensor, need_dx=True):
    """Accumulate dW, db into the layer and return dx (or None)."""
    if dy.shape[-1] != layer.out_dim or x.shape[-1] != layer.in_dim or dy.shape[0] != x.shape[0]:
        raise InvalidInputError(
            f"shape mismatch: layer {layer.in_dim}->{layer.out_dim}, x {tuple(x.shape)}, dy {tuple(dy.shape)}"
        )
    layer.grad_weight += dy.T @ x
    layer.grad_bias += dy.sum(0)
    if need_dx:
        return dy @ layer.weight
    return None


class Mlp:
    """Stack of linear layers; ``relu[i]`` marks a ReLU after layer ``i``."""

    def __init__(self, dims, relu, dtype=torch.float32, generator=None, zero_last=False, last_bound=None):
        if len(relu) != len(dims) - 1:
            raise InvalidInputError("need one activation flag per layer")
        self.relu = list(relu)
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            bound = last_bound if (last and not relu[i]) else None
            self.layers.append(LinearLayer(a, b, dtype, generator, bound=bound, zero=last and zero_last))

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def forward(self, x):
        """Return ``(y, cache)``; the cache holds each layer's input plus the output."""
        acts = [x]
        h = x
        for layer, act in zip(self.layers, self.relu):
            h = linear_forward(layer, h)
            if act:
                h = torch.relu(h)
            acts.append(h)
        return h, acts

    def backward(self, cache, dy, need_dx=True):
        g = dy
        n = len(self.layers)
        for i in reversed(range(n)):
            layer = self.layers[i]
            if self.relu[i]:
                g = g * (cache[i + 1] > 0).to(g.dtype)
            g = linear_backward(layer, cache[i], g, need_dx=need_dx or i > 0)
        return g

    def named_layers(self, prefix):
        return [(f"{prefix}.{i}", layer) for i, layer in enumerate(self.layers)]


@dataclass(frozen=True)
class NetDims:
    """Widths shared by the three networks."""

    voxel_channels: int = 4
    num_strides: int = 3
    hidden: int = 64
    time_dim: int = None
    pe_xyz: int = 10
    pe_dir: int = 4
    pe_time: int = 8
    pe_voxel: int = 2

    @property
    def voxel_pe(self) -> PeSpec:
        return PeSpec(self.pe_voxel, True)

    @property
    def t_dim(self) -> int:
        """Time embedding width: one positional-encoded voxel feature."""
        expected = self.voxel_pe.out_dim(self.voxel_channels)
        if self.time_dim is not None and self.time_dim != expected:
            raise InvalidInputError(
                f"time embedding width {self.time_dim} must equal C_v*(2*L_v+1) = {expected}"
            )
        return expected

    @property
    def xyz_dim(self) -> int:
        return PeSpec(self.pe_xyz).out_dim(3)

    @property
    def dir_dim(self) -> int:
        return PeSpec(self.pe_dir).out_dim(3)

    @property
    def feat_dim(self) -> int:
        return self.voxel_pe.out_dim(self.voxel_channels * self.num_strides)


class TimeNet:
    def __init__(self, dims: NetDims, dtype=torch.float32, generator=None):
        self.pe = PeSpec(dims.pe_time)
        self.mlp = Mlp([self.pe.out_dim(1), dims.hidden, dims.t_dim], [True, False], dtype, generator)

    def forward(self, t: torch.Tensor):
        """``t`` (U,) -> embeddings (U, C_t) and cache."""
        enc = positional_encode(t.reshape(-1, 1).to(self.mlp.layers[0].weight.dtype), self.pe)
        return self.mlp.forward(enc)

    def backward(self, cache, d_emb):
        self.mlp.backward(cache, d_emb, need_dx=False)

    def named_layers(self):
        return self.mlp.named_layers("time")


class DeformNet:
    def __init__(self, dims: NetDims, dtype=torch.float32, generator=None):
        self.mlp = Mlp(
            [dims.xyz_dim + dims.t_dim, dims.hidden, dims.hidden, 3],
            [True, True, False],
            dtype,
            generator,
            zero_last=True,
        )

    def forward(self, xyz_enc, t_emb):
        return self.mlp.forward(torch.cat([xyz_enc, t_emb], dim=-1))

    def backward(self, cache, d_offset, t_dim):
        """Return d t_emb (P, C_t); input-encoding gradients are discarded."""
        dx = self.mlp.backward(cache, d_offset)
        return dx[:, -t_dim:]

    def named_layers(self):
        return self.mlp.named_layers("deform")


class RadianceNet:
    def __init__(self, dims: NetDims, dtype=torch.float32, generator=None):
        h = dims.hidden
        self.dims = dims
        self.trunk = Mlp([dims.feat_dim + dims.t_dim + dims.xyz_dim, h, h], [True, True], dtype, generator)
        self.density = Mlp([h, 1], [False], dtype, generator, last_bound=1.0 / math.sqrt(h))
        self.color = Mlp([h + dims.dir_dim, h, 3], [True, False], dtype, generator, last_bound=1.0 / math.sqrt(h))

    def forward_density(self, feat_enc, t_emb, xyz_enc):
        """Returns ``(raw_sigma (P,), trunk_out (P, h), cache)``."""
        h, trunk_cache = self.trunk.forward(torch.cat([feat_enc, t_emb, xyz_enc], dim=-1))
        raw, dens_cache = self.density.forward(h)
        return raw[:, 0], h, (trunk_cache, dens_cache)

    def forward_color(self, trunk_out, dir_enc):
        return self.color.forward(torch.cat([trunk_out, dir_enc], dim=-1))

    def backward(self, cache, d_raw, color_cache, d_logits, color_rows):
        """Backprop density and color heads into the trunk.

        ``color_rows`` indexes the points that ran the color branch. Returns
        ``(d_feat_enc, d_t_emb)``.
        """
        trunk_cache, dens_cache = cache
        dh = self.density.backward(dens_cache, d_raw.unsqueeze(-1))
        if color_cache is not None and color_rows.numel():
            h = self.dims.hidden
            dc = self.color.backward(color_cache, d_logits)
            dh = dh.index_add(0, color_rows, dc[:, :h])
        dx = self.trunk.backward(trunk_cache, dh)
        fd, td = self.dims.feat_dim, self.dims.t_dim
        return dx[:, :fd], dx[:, fd : fd + td]

    def named_layers(self):
        return self.trunk.named_layers("trunk") + self.density.named_layers("density") + self.color.named_layers("color")


def count_params(named_layers) -> int:
    return sum(layer.weight.numel() + layer.bias.numel() for _, layer in named_layers)
