"""The dynamic radiance field: voxel grid plus time, deformation and radiance networks."""

from __future__ import annotations

import logging

import torch

from .config import TrainConfig
from .encoding import PeSpec
from .mlp import DeformNet, RadianceNet, TimeNet, count_params
from .voxels import VoxelGrid, quantize_half, upscale_grid

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class DynamicField:
    def __init__(self, config: TrainConfig, bbox=None, resolution=None, generator=None):
        self.config = config
        self.dims = config.net_dims()
        self.dtype = DTYPES[config.dtype]
        bbox = bbox if bbox is not None else config.bbox
        if bbox is None:
            raise ValueError("a scene bbox is required (config or dataset)")
        bbox = tuple(float(v) for v in bbox)
        if generator is None:
            generator = torch.Generator().manual_seed(config.seed)
        res = resolution if resolution is not None else config.initial_resolution()
        self.grid = VoxelGrid(
            torch.zeros((config.voxel_channels, *res), dtype=self.dtype),
            bbox[:3],
            bbox[3:],
            config.strides,
            working_dtype=self.dtype,
        )
        self.time_net = TimeNet(self.dims, self.dtype, generator)
        self.deform_net = DeformNet(self.dims, self.dtype, generator)
        self.radiance_net = RadianceNet(self.dims, self.dtype, generator)
        # zero time-embedding head: a fresh model is identical at every time stamp
        self.time_net.mlp.layers[-1].weight.zero_()
        self.sigma_shift = config.sigma_shift
        self.xyz_pe = PeSpec(self.dims.pe_xyz)
        self.dir_pe = PeSpec(self.dims.pe_dir)
        self.voxel_pe = self.dims.voxel_pe
        log.debug("model parameters: %d (mlp) + %d (voxels)", self.num_mlp_params(), self.grid.data.numel())

    @property
    def bbox_min(self):
        return self.grid.bbox_min

    @property
    def bbox_max(self):
        return self.grid.bbox_max

    def named_layers(self):
        return self.time_net.named_layers() + self.deform_net.named_layers() + self.radiance_net.named_layers()

    def param_groups(self) -> dict:
        """Layers per optimizer group; the voxel group is the grid itself."""
        return {
            "voxels": [("grid", self.grid)],
            "deform_net": self.deform_net.named_layers(),
            "other_mlps": self.time_net.named_layers() + self.radiance_net.named_layers(),
        }

    def num_mlp_params(self) -> int:
        return count_params(self.named_layers())

    def zero_grad(self):
        self.grid.zero_grad()
        for _, layer in self.named_layers():
            layer.zero_grad()

    def normalize(self, p: torch.Tensor) -> torch.Tensor:
        lo = torch.tensor(self.bbox_min, dtype=p.dtype)
        hi = torch.tensor(self.bbox_max, dtype=p.dtype)
        return (p - lo) / (hi - lo) * 2 - 1

    def upscale(self):
        target = self.config.resolution
        old = self.grid
        self.grid = upscale_grid(old, 2, max_resolution=target)
        log.info("voxel grid upscaled %s -> %s", old.resolution, self.grid.resolution)

    def to_half(self):
        self.grid = quantize_half(self.grid)
        log.info("voxel storage switched to half precision")
