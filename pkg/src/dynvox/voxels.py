"""Dense neural-voxel grids with trilinear and multi-distance interpolation.

The grid stores ``data`` with logical shape ``(C, Nx, Ny, Nz)``; vertex
``(i, j, k)`` sits at ``bbox_min + (i, j, k) / (N - 1) * extent``.  A stride
``s`` view keeps the origin-anchored vertices ``0, s, 2s, ...`` along each
axis.  Points past the last retained vertex of a view stay in its last cell
and are linearly extrapolated there, which keeps every view exact on affine
fields.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CheckpointError, EmptyGradientError, InvalidInputError, OutOfBoundsError

log = logging.getLogger(__name__)

HALF_MAX = 65504.0
GRID_MAGIC = b"TNVX"
GRID_VERSION = 1
_DTYPE_TAGS = {torch.float32: 0, torch.float16: 1, torch.float64: 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_NP_CODES = {0: "<f4", 1: "<f2", 2: "<f8"}

# corner bit pattern, ordered (dx, dy, dz) with z fastest
_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


@dataclass
class GridView:
    """A dense lattice spanning ``[bbox_min, bbox_max]`` (vertices on both ends)."""

    data: torch.Tensor  # (C, nx, ny, nz)
    bbox_min: tuple
    bbox_max: tuple


@dataclass
class InterpCache:
    """Per-stride cell indices and fractional offsets kept from a forward query."""

    strides: tuple
    flat_idx: list  # per stride (P, 8) int64 into the flattened fine lattice
    frac: list  # per stride (P, 3)
    weights: list  # per stride (P, 8) corner weights
    corners: list  # per stride (C, P, 8) gathered vertex values
    du_dp: list  # per stride (3,) lattice units per world unit
    inside: torch.Tensor  # (P, 3) bool, False where the point was clamped to the bbox


@dataclass
class VoxelGrid:
    data: torch.Tensor
    bbox_min: tuple
    bbox_max: tuple
    strides: tuple = (1, 2, 4)
    working_dtype: torch.dtype = torch.float32
    grad: torch.Tensor = None
    track_stride_grads: bool = False
    stride_grads: dict = field(default_factory=dict)
    backward_passes: int = 0

    def __post_init__(self):
        self.bbox_min = tuple(float(v) for v in self.bbox_min)
        self.bbox_max = tuple(float(v) for v in self.bbox_max)
        self.strides = tuple(int(s) for s in self.strides)
        if self.data.dim() != 4:
            raise InvalidInputError(f"grid data must be 4-D (C, Nx, Ny, Nz), got {tuple(self.data.shape)}")
        if min(self.data.shape[1:]) < 2:
            raise InvalidInputError("grid needs at least 2 vertices per axis")
        if any(lo >= hi for lo, hi in zip(self.bbox_min, self.bbox_max)):
            raise InvalidInputError(f"degenerate bbox {self.bbox_min} .. {self.bbox_max}")
        if not self.strides or any(s < 1 for s in self.strides) or list(self.strides) != sorted(set(self.strides)):
            raise InvalidInputError(f"strides must be positive and strictly increasing, got {self.strides}")
        if self.grad is None:
            self.zero_grad()

    @classmethod
    def zeros(cls, channels, resolution, bbox_min, bbox_max, strides=(1, 2, 4), dtype=torch.float32, **kw):
        res = _as_res(resolution)
        data = torch.zeros((channels, *res), dtype=dtype)
        grid = cls(data, bbox_min, bbox_max, strides, working_dtype=dtype, **kw)
        grid.check_strides(res)
        return grid

    # -- shape helpers -----------------------------------------------------
    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> tuple:
        return tuple(self.data.shape[1:])

    @property
    def is_half(self) -> bool:
        return self.data.dtype == torch.float16

    @property
    def extent(self) -> tuple:
        return tuple(hi - lo for lo, hi in zip(self.bbox_min, self.bbox_max))

    @property
    def voxel_size(self) -> tuple:
        return tuple(e / (n - 1) for e, n in zip(self.extent, self.resolution))

    def check_strides(self, res=None):
        res = res or self.resolution
        limit = min(res) - 1
        bad = [s for s in self.strides if s > limit]
        if bad:
            raise InvalidInputError(f"strides {bad} exceed min(N) - 1 = {limit}")

    def effective_strides(self) -> tuple:
        """Configured strides capped at ``min(N) - 1`` (coarse grids during upscaling)."""
        limit = min(self.resolution) - 1
        return tuple(min(s, limit) for s in self.strides)

    def values(self) -> torch.Tensor:
        """Grid data widened to working precision."""
        return self.data.to(self.working_dtype)

    def zero_grad(self):
        self.grad = torch.zeros(self.data.shape, dtype=self.working_dtype)
        self.stride_grads = {}
        self.backward_passes = 0

    def view(self, stride: int) -> GridView:
        """Origin-anchored ``V[::s]`` with the world extent of its last vertex."""
        if stride < 1 or stride > min(self.resolution) - 1:
            raise InvalidInputError(f"stride {stride} invalid for resolution {self.resolution}")
        sub = self.values()[:, ::stride, ::stride, ::stride]
        vmax = tuple(
            lo + stride * ((n - 1) // stride) * vs
            for lo, n, vs in zip(self.bbox_min, self.resolution, self.voxel_size)
        )
        return GridView(sub, self.bbox_min, vmax)


def _as_res(resolution) -> tuple:
    if isinstance(resolution, int):
        return (resolution,) * 3
    res = tuple(int(r) for r in resolution)
    if len(res) != 3:
        raise InvalidInputError(f"resolution must have 3 entries, got {resolution}")
    return res


def _check_points(p: torch.Tensor, lo, hi):
    if p.dim() != 2 or p.shape[1] != 3:
        raise InvalidInputError(f"points must have shape (P, 3), got {tuple(p.shape)}")
    lo_t = torch.tensor(lo, dtype=p.dtype)
    hi_t = torch.tensor(hi, dtype=p.dtype)
    tol = 1e-9 * (hi_t - lo_t)
    if ((p < lo_t - tol) | (p > hi_t + tol)).any():
        raise OutOfBoundsError("point outside grid bbox; callers must clamp before interpolation")
    return lo_t, hi_t


def _axis_weights(frac: torch.Tensor):
    """Per-axis (1 - f, f) pairs, each (P, 2)."""
    return [torch.stack((1 - f, f), dim=-1) for f in frac.unbind(-1)]


def _trilinear_weights(frac: torch.Tensor) -> torch.Tensor:
    """Corner weights (P, 8) in ``_CORNERS`` order."""
    wx, wy, wz = _axis_weights(frac)
    return ((wx[:, :, None] * wy[:, None, :]).reshape(-1, 4, 1) * wz[:, None, :]).reshape(-1, 8)


def _frac_grad(corner_dot: torch.Tensor, frac: torch.Tensor) -> torch.Tensor:
    """Contract per-corner values (P, 8) with d weight / d frac; returns (P, 3).

    Along each axis the derivative is the difference of the two opposite
    faces, blended bilinearly by the other two axes' weights.
    """
    wx, wy, wz = _axis_weights(frac)
    c = corner_dot.reshape(-1, 2, 2, 2)
    dx = torch.einsum("pbc,pb,pc->p", c[:, 1] - c[:, 0], wy, wz)
    dy = torch.einsum("pac,pa,pc->p", c[:, :, 1] - c[:, :, 0], wx, wz)
    dz = torch.einsum("pab,pa,pb->p", c[:, :, :, 1] - c[:, :, :, 0], wx, wy)
    return torch.stack((dx, dy, dz), dim=-1)


def _cells(u: torch.Tensor, counts: torch.Tensor):
    """Cell origin (clamped so the last cell extrapolates) and fractional offset."""
    i0 = torch.clamp(torch.floor(u), min=torch.zeros_like(counts), max=counts - 2).to(torch.int64)
    return i0, u - i0.to(u.dtype)


def trilinear_interpolate(view: GridView, p: torch.Tensor) -> torch.Tensor:
    """Trilinear blend of the 8 vertices around each point of ``p`` (P, 3) -> (P, C)."""
    lo, hi = _check_points(p, view.bbox_min, view.bbox_max)
    data = view.data
    C, nx, ny, nz = data.shape
    counts = torch.tensor([nx, ny, nz], dtype=p.dtype)
    pc = torch.minimum(torch.maximum(p, lo), hi)
    u = (pc - lo) / (hi - lo) * (counts - 1)
    i0, frac = _cells(u, counts)
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offs = torch.tensor([(dx * ny + dy) * nz + dz for dx, dy, dz in _CORNERS], dtype=torch.int64)
    corners = data.reshape(C, -1)[:, base[:, None] + offs]
    return _blend(corners, _trilinear_weights(frac))


def _blend(corners: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """(C, P, 8) corner values and (P, 8) weights -> (P, C)."""
    return (corners * w).sum(-1).T


def multi_distance_interpolate(grid: VoxelGrid, p: torch.Tensor, return_cache: bool = False):
    """Concatenate trilinear features from each stride view, in stride order.

    Returns ``(P, M * C)``; with ``return_cache`` also the :class:`InterpCache`
    needed by :func:`backward_interpolate`.
    """
    lo, hi = _check_points(p, grid.bbox_min, grid.bbox_max)
    p = p.to(grid.working_dtype)
    lo, hi = lo.to(p.dtype), hi.to(p.dtype)
    inside = (p >= lo) & (p <= hi)
    pc = torch.minimum(torch.maximum(p, lo), hi)
    C, nx, ny, nz = grid.data.shape
    res = torch.tensor([nx, ny, nz], dtype=p.dtype)
    g = (pc - lo) / (hi - lo) * (res - 1)  # fine lattice coordinates
    table = grid.values().reshape(C, -1)
    feats, flat_idx, fracs, weights, corners, scales = [], [], [], [], [], []
    strides = grid.effective_strides()
    for s in strides:
        counts = torch.floor((res - 1) / s) + 1
        i0, frac = _cells(g / s, counts)
        base = ((i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]) * s
        offs = torch.tensor([s * ((dx * ny + dy) * nz + dz) for dx, dy, dz in _CORNERS], dtype=torch.int64)
        idx = base[:, None] + offs
        w = _trilinear_weights(frac)
        cv = table[:, idx]
        feats.append(_blend(cv, w))
        flat_idx.append(idx)
        fracs.append(frac)
        weights.append(w)
        corners.append(cv)
        scales.append((res - 1) / ((hi - lo) * s))
    out = torch.cat(feats, dim=-1)
    if not return_cache:
        return out
    return out, InterpCache(strides, flat_idx, fracs, weights, corners, scales, inside)


def backward_interpolate(grid: VoxelGrid, p: torch.Tensor, upstream: torch.Tensor, cache: InterpCache = None):
    """Scatter ``upstream`` (P, M*C) into ``grid.grad`` and return d/dp (P, 3).

    Accumulation is sequential over strides, so results are reproducible bit for bit.
    """
    if cache is None:
        _, cache = multi_distance_interpolate(grid, p, return_cache=True)
    C = grid.channels
    M = len(cache.strides)
    P = cache.inside.shape[0]
    if upstream.shape != (P, M * C):
        raise InvalidInputError(f"upstream shape {tuple(upstream.shape)} != {(P, M * C)}")
    upstream = upstream.to(grid.working_dtype).T.contiguous()  # (M*C, P)
    nvox = math.prod(grid.resolution)
    total = torch.zeros((C, nvox), dtype=grid.working_dtype)
    dp = torch.zeros((P, 3), dtype=grid.working_dtype)
    for m, s in enumerate(cache.strides):
        up = upstream[m * C : (m + 1) * C]  # (C, P)
        w = cache.weights[m]
        contrib = (w * up[:, :, None]).reshape(C, -1)
        flat = cache.flat_idx[m].reshape(-1)
        total.index_add_(1, flat, contrib)
        if grid.track_stride_grads:
            acc = grid.stride_grads.get(m)
            if acc is None:
                acc = torch.zeros((nvox, C), dtype=grid.working_dtype)
                grid.stride_grads[m] = acc
            acc += torch.zeros((C, nvox), dtype=grid.working_dtype).index_add_(1, flat, contrib).T
        # d feature / d frac, contracted with upstream over channels
        corner_dot = (cache.corners[m] * up[:, :, None]).sum(0)  # (P, 8)
        dp += _frac_grad(corner_dot, cache.frac[m]) * cache.du_dp[m]
    dp = dp * cache.inside.to(dp.dtype)
    grid.grad += total.reshape(grid.grad.shape)
    grid.backward_passes += 1
    return dp


def grad_magnitude_per_stride(grid: VoxelGrid) -> dict:
    """Per-stride gradient diagnostics keyed by configured stride.

    Each entry holds ``field`` (per-vertex L2 norm over channels, shape
    ``(Nx, Ny, Nz)``) and ``norm`` (L2 norm of the whole accumulator).
    """
    if grid.backward_passes == 0 or not grid.track_stride_grads:
        raise EmptyGradientError("no backward pass with per-stride accumulators has run on this grid")
    out = {}
    for m, s in enumerate(grid.strides):
        acc = grid.stride_grads.get(m)
        if acc is None:
            acc = torch.zeros((math.prod(grid.resolution), grid.channels), dtype=grid.working_dtype)
        fld = acc.norm(dim=1).reshape(grid.resolution)
        out[s] = {"field": fld, "norm": float(acc.norm())}
    return out


def _resample_matrix(n_old: int, n_new: int, dtype) -> torch.Tensor:
    x = torch.arange(n_new, dtype=torch.float64) * (n_old - 1) / (n_new - 1)
    i0 = torch.clamp(torch.floor(x), max=n_old - 2).to(torch.int64)
    f = x - i0
    A = torch.zeros((n_new, n_old), dtype=torch.float64)
    rows = torch.arange(n_new)
    A[rows, i0] = 1 - f
    A[rows, i0 + 1] += f
    return A.to(dtype)


def upscale_grid(grid: VoxelGrid, factor: int = 2, max_resolution=None) -> VoxelGrid:
    """Resample onto ``factor * N`` vertices per axis (capped), same bbox.

    New vertex values are the old trilinear interpolant evaluated at the new
    vertex positions; gradients start from zero.
    """
    if factor != 2:
        raise InvalidInputError("only factor 2 is supported")
    cap = _as_res(max_resolution) if max_resolution is not None else (None,) * 3
    new_res = tuple(2 * n if c is None else min(2 * n, c) for n, c in zip(grid.resolution, cap))
    vals = grid.values()
    mats = [_resample_matrix(o, n, vals.dtype) for o, n in zip(grid.resolution, new_res)]
    new = torch.einsum("cxyz,ax,by,dz->cabd", vals, *mats).contiguous()
    out = VoxelGrid(
        new.to(grid.data.dtype),
        grid.bbox_min,
        grid.bbox_max,
        grid.strides,
        working_dtype=grid.working_dtype,
        track_stride_grads=grid.track_stride_grads,
    )
    return out


def to_half(values: torch.Tensor) -> torch.Tensor:
    """Round to binary16, saturating at the half-precision range."""
    big = values.abs() > HALF_MAX
    if big.any():
        log.warning("saturating %d voxel values beyond half-precision range", int(big.sum()))
        values = values.clamp(-HALF_MAX, HALF_MAX)
    return values.to(torch.float16)


def quantize_half(grid: VoxelGrid) -> VoxelGrid:
    out = VoxelGrid(
        to_half(grid.data),
        grid.bbox_min,
        grid.bbox_max,
        grid.strides,
        working_dtype=grid.working_dtype,
        grad=grid.grad,
        track_stride_grads=grid.track_stride_grads,
    )
    return out


# -- serialization ---------------------------------------------------------
def grid_to_bytes(grid: VoxelGrid) -> bytes:
    tag = _DTYPE_TAGS.get(grid.data.dtype)
    if tag is None:
        raise InvalidInputError(f"cannot serialize grid dtype {grid.data.dtype}")
    C, nx, ny, nz = grid.data.shape
    header = GRID_MAGIC + struct.pack("<IIIIII", GRID_VERSION, C, nx, ny, nz, tag)
    header += struct.pack("<6d", *grid.bbox_min, *grid.bbox_max)
    header += struct.pack("<I", len(grid.strides)) + struct.pack(f"<{len(grid.strides)}I", *grid.strides)
    payload = grid.data.contiguous().numpy().astype(_NP_CODES[tag], copy=False).tobytes()
    return header + payload


def grid_from_bytes(buf: bytes, offset: int = 0, working_dtype=torch.float32):
    """Parse a grid block; returns ``(grid, next_offset)``."""
    if buf[offset : offset + 4] != GRID_MAGIC:
        raise CheckpointError("bad grid magic")
    try:
        version, C, nx, ny, nz, tag = struct.unpack_from("<IIIIII", buf, offset + 4)
        if version != GRID_VERSION:
            raise CheckpointError(f"unsupported grid version {version}")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown grid dtype tag {tag}")
        pos = offset + 4 + 24
        bbox = struct.unpack_from("<6d", buf, pos)
        pos += 48
        (ns,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        strides = struct.unpack_from(f"<{ns}I", buf, pos)
        pos += 4 * ns
    except struct.error as exc:
        raise CheckpointError(f"truncated grid header: {exc}") from None
    count = C * nx * ny * nz
    itemsize = np.dtype(_NP_CODES[tag]).itemsize
    end = pos + count * itemsize
    if end > len(buf):
        raise CheckpointError("truncated grid payload")
    arr = np.frombuffer(buf, dtype=_NP_CODES[tag], count=count, offset=pos).reshape(C, nx, ny, nz)
    data = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    grid = VoxelGrid(data, bbox[:3], bbox[3:], strides, working_dtype=working_dtype)
    return grid, end
