"""Ray generation, point sampling, the per-point field pipeline and volume rendering.

Samples along a ray sit at the midpoints of equal intervals of length
``step`` between bbox entry and exit; the last interval is truncated at the
exit.  Rendering works on a padded ``(R, S)`` layout (rays by sample slots) so
transmittance is a per-ray cumulative sum; network queries run only on the
valid slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .encoding import positional_encode, positional_encode_backward
from .errors import ConfigError, InvalidInputError
from .mlp import sigmoid, softplus
from .voxels import backward_interpolate, multi_distance_interpolate, trilinear_interpolate

BOX_EPS = 1e-9


@dataclass
class Camera:
    pose: np.ndarray  # (4, 4) camera-to-world
    focal: float
    height: int
    width: int


@dataclass
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    t_near: float = 0.0
    t_far: float = math.inf

    def __post_init__(self):
        if not self.t_near < self.t_far:
            raise InvalidInputError("ray needs t_near < t_far")
        if abs(float(self.direction.norm()) - 1) > 1e-6:
            raise InvalidInputError("ray direction must be unit length")


def _pose(camera: Camera, dtype) -> torch.Tensor:
    pose = torch.as_tensor(np.asarray(camera.pose, dtype=np.float64))
    if pose.shape != (4, 4):
        raise InvalidInputError(f"pose must be 4x4, got {tuple(pose.shape)}")
    if abs(float(torch.linalg.det(pose[:3, :3]))) < 1e-8:
        raise InvalidInputError("singular camera pose")
    return pose.to(dtype)


def _camera_dirs(camera: Camera, rows, cols, dtype):
    pose = _pose(camera, torch.float64)
    rows = torch.as_tensor(rows, dtype=torch.float64)
    cols = torch.as_tensor(cols, dtype=torch.float64)
    f = float(camera.focal)
    cam = torch.stack(
        [(cols + 0.5 - camera.width / 2) / f, -(rows + 0.5 - camera.height / 2) / f, -torch.ones_like(cols)],
        dim=-1,
    )
    d = cam @ pose[:3, :3].T
    d = d / d.norm(dim=-1, keepdim=True)
    o = pose[:3, 3].expand_as(d)
    return o.to(dtype).contiguous(), d.to(dtype).contiguous()


def generate_ray(camera: Camera, row: int, col: int, dtype=torch.float64) -> Ray:
    """Pinhole ray through the center of pixel ``(row, col)``."""
    if not (0 <= row < camera.height and 0 <= col < camera.width):
        raise InvalidInputError(f"pixel ({row}, {col}) outside {camera.height}x{camera.width} image")
    o, d = _camera_dirs(camera, [row], [col], dtype)
    return Ray(o[0], d[0])


def generate_rays(camera: Camera, dtype=torch.float32):
    """All pixel rays in row-major order: ``(origins (H*W, 3), dirs (H*W, 3))``."""
    rr, cc = torch.meshgrid(torch.arange(camera.height), torch.arange(camera.width), indexing="ij")
    return _camera_dirs(camera, rr.reshape(-1), cc.reshape(-1), dtype)


def ray_box(origins, dirs, bbox_min, bbox_max, t_near=0.0):
    """Slab test; returns entry, exit and a hit mask."""
    lo = torch.tensor(bbox_min, dtype=origins.dtype)
    hi = torch.tensor(bbox_max, dtype=origins.dtype)
    safe = torch.where(dirs.abs() < BOX_EPS, torch.full_like(dirs, BOX_EPS) * torch.where(dirs < 0, -1.0, 1.0), dirs)
    ta = (lo - origins) / safe
    tb = (hi - origins) / safe
    t0 = torch.minimum(ta, tb).amax(-1).clamp(min=t_near)
    t1 = torch.maximum(ta, tb).amin(-1)
    return t0, t1, t1 > t0


@dataclass
class SampleBatch:
    ray_idx: torch.Tensor  # (P,)
    positions: torch.Tensor  # (P, 3)
    delta: torch.Tensor  # (P,)
    mask: torch.Tensor  # (R, S) bool, valid slots in ray-major order
    counts: torch.Tensor  # (R,)


def sample_rays(origins, dirs, bbox_min, bbox_max, step: float, t_near=0.0) -> SampleBatch:
    R = origins.shape[0]
    t0, t1, hit = ray_box(origins, dirs, bbox_min, bbox_max, t_near)
    length = torch.where(hit, t1 - t0, torch.zeros_like(t0))
    counts = torch.ceil(length.double() / step - 1e-6).clamp(min=0).to(torch.int64)
    counts = torch.where(hit, counts.clamp(min=1), torch.zeros_like(counts))
    S = int(counts.max()) if R else 0
    slots = torch.arange(S)
    mask = slots[None, :] < counts[:, None]
    ray_idx = mask.nonzero()[:, 0]
    slot = slots.expand(R, S)[mask]
    tt = t0[ray_idx] + (slot.to(origins.dtype) + 0.5) * step
    pos = origins[ray_idx] + tt[:, None] * dirs[ray_idx]
    delta = torch.full((ray_idx.shape[0],), step, dtype=origins.dtype)
    last = slot == counts[ray_idx] - 1
    tail = length[ray_idx] - slot.to(origins.dtype) * step
    delta = torch.where(last, tail, delta)
    return SampleBatch(ray_idx, pos, delta, mask, counts)


def sample_points(ray: Ray, bbox_min, bbox_max, step: float):
    """Positions and interval lengths for one ray (empty when the ray misses the box)."""
    s = sample_rays(ray.origin[None], ray.direction[None], bbox_min, bbox_max, step, ray.t_near)
    return s.positions, s.delta


def default_step(model) -> float:
    return 0.5 * min(model.grid.voxel_size)


# -- compositing -----------------------------------------------------------
@dataclass
class Composite:
    rgb: torch.Tensor  # (R, 3)
    t_last: torch.Tensor  # (R,)
    weights: torch.Tensor  # (R, S)
    trans: torch.Tensor  # (R, S) T_i
    tau: torch.Tensor  # (R, S) sigma * delta


def composite(sigma, rgb, delta) -> Composite:
    """Emission-absorption compositing on padded ``(R, S)`` samples."""
    tau = sigma * delta
    csum = torch.cumsum(tau, dim=1)
    trans = torch.exp(-(csum - tau))
    alpha = 1 - torch.exp(-tau)
    w = trans * alpha
    t_last = torch.exp(-csum[:, -1]) if tau.shape[1] else torch.ones(tau.shape[0], dtype=tau.dtype)
    # a running sum is sequential per ray, so trailing padding cannot reorder it
    contrib = w.unsqueeze(-1) * rgb
    out = torch.cumsum(contrib, dim=1)[:, -1] if tau.shape[1] else contrib.sum(1)
    return Composite(out, t_last, w, trans, tau)


def composite_backward(comp: Composite, rgb, delta, d_rgb, d_t_last, d_weights=None, d_sample_rgb=None):
    """Exact reverse of :func:`composite`; returns ``(d_sigma, d_rgb_samples)``.

    ``d_weights`` and ``d_sample_rgb`` carry extra upstream on the per-sample
    weights and colors (the all-points loss).
    """
    w = comp.weights
    gw = (d_rgb.unsqueeze(1) * rgb).sum(-1)
    if d_weights is not None:
        gw = gw + d_weights
    prod = w * gw
    suffix = torch.flip(torch.cumsum(torch.flip(prod, [1]), 1), [1]) - prod  # sum over k > i
    t_next = comp.trans * torch.exp(-comp.tau)
    d_tau = t_next * gw - suffix - (comp.t_last * d_t_last).unsqueeze(1)
    d_sigma = d_tau * delta
    d_srgb = w.unsqueeze(-1) * d_rgb.unsqueeze(1)
    if d_sample_rgb is not None:
        d_srgb = d_srgb + d_sample_rgb
    return d_sigma, d_srgb


# -- per-point field pipeline ----------------------------------------------
@dataclass
class PointRecords:
    samples: SampleBatch
    uniq_times: torch.Tensor
    time_idx: torch.Tensor  # (P,) index into uniq_times
    time_cache: list
    xyz_enc: torch.Tensor
    deform_cache: list
    inbox: torch.Tensor  # (P, 3) deformed coordinate was not clamped
    deformed: torch.Tensor  # (P, 3) clamped deformed points
    interp_cache: object
    feat: torch.Tensor
    rad_cache: tuple
    pre_sigma: torch.Tensor
    sigma: torch.Tensor
    rows: torch.Tensor  # points that ran the color branch
    color_cache: list
    rgb_rows: torch.Tensor
    rgb: torch.Tensor  # (P, 3), zero on filtered points


def _check_threshold(alpha_threshold):
    if not 0 <= alpha_threshold < 1:
        raise ConfigError(f"alpha threshold must lie in [0, 1), got {alpha_threshold}")


def density_filter(alpha: torch.Tensor, alpha_threshold: float) -> torch.Tensor:
    """Mask of samples whose color branch is evaluated (threshold 0 keeps all)."""
    _check_threshold(alpha_threshold)
    if alpha_threshold == 0:
        return torch.ones_like(alpha, dtype=torch.bool)
    return alpha > alpha_threshold


def query_points(model, samples: SampleBatch, dirs, ray_times, alpha_threshold) -> PointRecords:
    dtype = model.dtype
    pts = samples.positions.to(dtype)
    ray_idx = samples.ray_idx
    uniq, inv = torch.unique(ray_times.to(dtype), return_inverse=True)
    t_emb_u, time_cache = model.time_net.forward(uniq)
    time_idx = inv[ray_idx]
    t_emb = t_emb_u[time_idx]

    xyz_enc = positional_encode(model.normalize(pts), model.xyz_pe)
    offset, deform_cache = model.deform_net.forward(xyz_enc, t_emb)
    lo = torch.tensor(model.bbox_min, dtype=dtype)
    hi = torch.tensor(model.bbox_max, dtype=dtype)
    moved = pts + offset
    inbox = (moved >= lo) & (moved <= hi)
    deformed = torch.minimum(torch.maximum(moved, lo), hi)

    feat, interp_cache = multi_distance_interpolate(model.grid, deformed, return_cache=True)
    feat_enc = positional_encode(feat, model.voxel_pe)
    raw, trunk_out, rad_cache = model.radiance_net.forward_density(feat_enc, t_emb, xyz_enc)
    pre = raw + model.sigma_shift
    sigma = softplus(pre)
    alpha = 1 - torch.exp(-sigma * samples.delta.to(dtype))
    rows = density_filter(alpha, alpha_threshold).nonzero()[:, 0]

    dir_enc = positional_encode(dirs.to(dtype), model.dir_pe)
    rgb = torch.zeros((pts.shape[0], 3), dtype=dtype)
    color_cache, rgb_rows = None, None
    if rows.numel():
        logits, color_cache = model.radiance_net.forward_color(trunk_out[rows], dir_enc[ray_idx[rows]])
        rgb_rows = sigmoid(logits)
        rgb[rows] = rgb_rows
    return PointRecords(samples, uniq, time_idx, time_cache, xyz_enc, deform_cache, inbox, deformed,
                        interp_cache, feat, rad_cache, pre, sigma, rows, color_cache, rgb_rows, rgb)


def query_points_backward(model, rec: PointRecords, d_sigma, d_rgb):
    """Backprop per-point density/color gradients into voxels and all three networks."""
    dims = model.dims
    d_pre = d_sigma * sigmoid(rec.pre_sigma)
    d_logits = None
    if rec.rows.numel():
        d_logits = d_rgb[rec.rows] * rec.rgb_rows * (1 - rec.rgb_rows)
    d_feat_enc, d_t1 = model.radiance_net.backward(rec.rad_cache, d_pre, rec.color_cache, d_logits, rec.rows)
    d_feat = positional_encode_backward(rec.feat, model.voxel_pe, d_feat_enc)
    d_deformed = backward_interpolate(model.grid, rec.deformed, d_feat, rec.interp_cache)
    d_offset = d_deformed * rec.inbox.to(d_deformed.dtype)
    d_t2 = model.deform_net.backward(rec.deform_cache, d_offset, dims.t_dim)
    d_t = torch.zeros((rec.uniq_times.shape[0], dims.t_dim), dtype=model.dtype)
    d_t.index_add_(0, rec.time_idx, d_t1 + d_t2)
    model.time_net.backward(rec.time_cache, d_t)


# -- full rendering ----------------------------------------------------------
@dataclass
class RenderResult:
    rgb: torch.Tensor  # (R, 3) composited against the background
    t_last: torch.Tensor  # (R,)
    comp: Composite
    sample_rgb: torch.Tensor  # (R, S, 3)
    delta: torch.Tensor  # (R, S)
    records: PointRecords
    background: str
    evaluated: int  # color-branch evaluations


def render_rays(model, origins, dirs, times, alpha_threshold=1e-4, background="black", step=None) -> RenderResult:
    """Render a batch of rays at per-ray times through the full pipeline."""
    _check_threshold(alpha_threshold)
    if background not in ("black", "white"):
        raise ConfigError(f"unknown background {background!r}")
    dtype = model.dtype
    origins, dirs = origins.to(dtype), dirs.to(dtype)
    if dirs.shape[0] and float((dirs.norm(dim=-1) - 1).abs().max()) > 1e-6:
        raise InvalidInputError("ray directions must be unit length (within 1e-6)")
    times = torch.as_tensor(times, dtype=dtype).expand(origins.shape[0])
    step = default_step(model) if step is None else step
    samples = sample_rays(origins, dirs, model.bbox_min, model.bbox_max, step)
    R, S = samples.mask.shape
    rec = query_points(model, samples, dirs, times, alpha_threshold)
    sigma_p = torch.zeros((R, S), dtype=dtype)
    delta_p = torch.zeros((R, S), dtype=dtype)
    rgb_p = torch.zeros((R, S, 3), dtype=dtype)
    sigma_p[samples.mask] = rec.sigma
    delta_p[samples.mask] = samples.delta.to(dtype)
    rgb_p[samples.mask] = rec.rgb
    comp = composite(sigma_p, rgb_p, delta_p)
    rgb = comp.rgb
    if background == "white":
        rgb = rgb + comp.t_last.unsqueeze(-1)
    return RenderResult(rgb, comp.t_last, comp, rgb_p, delta_p, rec, background, int(rec.rows.numel()))


def render_backward(model, res: RenderResult, d_rgb, d_t_last, d_weights=None, d_sample_rgb=None):
    """Accumulate gradients of a scalar loss given its upstream on the render outputs."""
    if d_rgb.shape != res.rgb.shape or d_t_last.shape != res.t_last.shape:
        raise InvalidInputError("upstream gradients do not match the rendered batch")
    if res.background == "white":
        d_t_last = d_t_last + d_rgb.sum(-1)
    d_sigma_p, d_rgb_p = composite_backward(res.comp, res.sample_rgb, res.delta, d_rgb, d_t_last,
                                            d_weights, d_sample_rgb)
    mask = res.records.samples.mask
    query_points_backward(model, res.records, d_sigma_p[mask], d_rgb_p[mask])


def render_image(model, camera: Camera, t: float, chunk_size=4096, alpha_threshold=1e-4, background="black"):
    """Render a full frame, ``chunk_size`` rays at a time; returns ``(H, W, 3)``."""
    origins, dirs = generate_rays(camera, model.dtype)
    out = []
    for s in range(0, origins.shape[0], chunk_size):
        res = render_rays(model, origins[s : s + chunk_size], dirs[s : s + chunk_size], t,
                          alpha_threshold, background)
        out.append(res.rgb)
    return torch.cat(out).reshape(camera.height, camera.width, 3)


def render_painted(grid, origins, dirs, background="black", step=None):
    """Render a grid whose channels are ``(sigma, r, g, b)`` directly, no networks.

    Used to compare the sampling, interpolation and compositing path against an
    analytic oracle.
    """
    if grid.channels != 4:
        raise InvalidInputError("painted grid needs 4 channels (sigma, r, g, b)")
    dtype = grid.working_dtype
    step = 0.5 * min(grid.voxel_size) if step is None else step
    samples = sample_rays(origins.to(dtype), dirs.to(dtype), grid.bbox_min, grid.bbox_max, step)
    R, S = samples.mask.shape
    lo = torch.tensor(grid.bbox_min, dtype=dtype)
    hi = torch.tensor(grid.bbox_max, dtype=dtype)
    pts = torch.minimum(torch.maximum(samples.positions, lo), hi)
    vals = trilinear_interpolate(grid.view(1), pts)
    sigma_p = torch.zeros((R, S), dtype=dtype)
    delta_p = torch.zeros((R, S), dtype=dtype)
    rgb_p = torch.zeros((R, S, 3), dtype=dtype)
    sigma_p[samples.mask] = vals[:, 0].clamp(min=0)
    delta_p[samples.mask] = samples.delta
    rgb_p[samples.mask] = vals[:, 1:]
    comp = composite(sigma_p, rgb_p, delta_p)
    rgb = comp.rgb + (comp.t_last.unsqueeze(-1) if background == "white" else 0)
    return rgb, comp.t_last
