"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .mlp import NetDims


@dataclass
class TrainConfig:
    # representation
    resolution: tuple = (100, 100, 100)
    voxel_channels: int = 4
    hidden: int = 64
    time_dim: int = None  # derived from voxel_channels and pe_voxel when unset
    pe_xyz: int = 10
    pe_dir: int = 4
    pe_time: int = 8
    pe_voxel: int = 2
    strides: tuple = (1, 2, 4)
    sigma_shift: float = -2.0
    bbox: tuple = None  # (xmin, ymin, zmin, xmax, ymax, zmax)
    # optimization
    total_iters: int = 20000
    batch_rays: int = 4096
    lr_voxels: float = 8e-2
    lr_deform: float = 6e-4
    lr_other: float = 8e-4
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    lambda_all: float = 1e-2
    lambda_bg: float = 1e-3
    upscale_iters: tuple = (2000, 4000, 6000)
    initial_res_divisor: int = 8
    half_precision_last: int = 1000
    # rendering
    alpha_threshold: float = 1e-4
    background: str = "black"
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 0
    eval_chunk: int = 4096
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if isinstance(self.resolution, int):
            self.resolution = (self.resolution,) * 3
        self.resolution = tuple(int(r) for r in self.resolution)
        self.strides = tuple(int(s) for s in self.strides)
        self.upscale_iters = tuple(int(i) for i in self.upscale_iters)
        if self.bbox is not None:
            self.bbox = tuple(float(v) for v in self.bbox)
            if len(self.bbox) != 6 or any(self.bbox[i] >= self.bbox[i + 3] for i in range(3)):
                raise ConfigError(f"bbox must be 6 numbers with min < max, got {self.bbox}")
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ConfigError(f"resolution needs 3 entries >= 2, got {self.resolution}")
        positive = ["voxel_channels", "hidden", "batch_rays", "lr_voxels", "lr_deform", "lr_other",
                    "lr_decay", "adam_eps", "initial_res_divisor", "checkpoint_every", "eval_chunk"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ["pe_xyz", "pe_dir", "pe_time", "pe_voxel", "total_iters", "half_precision_last",
                     "lambda_all", "lambda_bg", "eval_every", "seed"]:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not self.strides or list(self.strides) != sorted(set(self.strides)) or self.strides[0] < 1:
            raise ConfigError(f"strides must be positive and strictly increasing, got {self.strides}")
        if max(self.strides) > min(self.resolution) - 1:
            raise ConfigError(f"stride {max(self.strides)} exceeds min(resolution) - 1")
        if list(self.upscale_iters) != sorted(set(self.upscale_iters)) or any(i <= 0 for i in self.upscale_iters):
            raise ConfigError(f"upscale_iters must be positive and strictly increasing, got {self.upscale_iters}")
        if self.upscale_iters and self.upscale_iters[-1] >= self.total_iters:
            raise ConfigError(f"upscale_iters {self.upscale_iters} must be < total_iters {self.total_iters}")
        if self.half_precision_last > self.total_iters:
            raise ConfigError("half_precision_last exceeds total_iters")
        if not 0 <= self.alpha_threshold < 1:
            raise ConfigError(f"alpha_threshold must lie in [0, 1), got {self.alpha_threshold}")
        if self.background not in ("black", "white"):
            raise ConfigError(f"background must be 'black' or 'white', got {self.background!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.net_dims().t_dim  # raises on inconsistent time_dim
        return self

    def net_dims(self) -> NetDims:
        try:
            dims = NetDims(self.voxel_channels, len(self.strides), self.hidden, self.time_dim,
                           self.pe_xyz, self.pe_dir, self.pe_time, self.pe_voxel)
            dims.t_dim
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return dims

    def initial_resolution(self) -> tuple:
        return tuple(max(2, -(-n // self.initial_res_divisor)) for n in self.resolution)

    def resolution_at(self, it: int) -> tuple:
        """Grid resolution in effect at iteration ``it``."""
        res = self.initial_resolution()
        for u in self.upscale_iters:
            if it >= u:
                res = tuple(min(2 * r, n) for r, n in zip(res, self.resolution))
        return res

    # -- text format -------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig" = None) -> "TrainConfig":
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse(key, val, kinds[key].default)
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, base: "TrainConfig" = None) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, base)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_TUPLE_KEYS = {"resolution", "strides", "upscale_iters", "bbox"}
_INT_KEYS = {f.name for f in dataclasses.fields(TrainConfig) if isinstance(f.default, int) and not isinstance(f.default, bool)}
_INT_KEYS |= {"time_dim"}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key, val, default):
    try:
        if val.lower() == "none":
            if key in ("time_dim", "bbox"):
                return None
            raise ConfigError(f"{key} may not be none")
        if key in _TUPLE_KEYS:
            parts = [p.strip() for p in val.split(",") if p.strip()]
            conv = float if key == "bbox" else int
            return tuple(conv(p) for p in parts)
        if key in _INT_KEYS:
            return int(val)
        if isinstance(default, float):
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None


def small_config(**kw) -> TrainConfig:
    """100^3 x 4 voxels, 64-wide networks."""
    return TrainConfig(**kw)


def base_config(**kw) -> TrainConfig:
    """160^3 x 6 voxels, 256-wide networks."""
    kw = {"resolution": (160, 160, 160), "voxel_channels": 6, "hidden": 256, **kw}
    return TrainConfig(**kw)


def tiny_config(**kw) -> TrainConfig:
    """Desk-scale schedule: 32^3 x 4 grid, 32-wide networks, 2000 iterations.

    The upscale and half-precision milestones keep the full-size proportions
    (1/10, 2/10, 3/10 and the final 1/20 of training).  Positional encodings
    use fewer frequencies than the full preset: with only 20 training views
    the higher bands fit each timestamp separately and hurt held-out views.
    """
    base = dict(
        resolution=(32, 32, 32),
        hidden=32,
        pe_xyz=5,
        pe_time=4,
        pe_dir=2,
        total_iters=2000,
        batch_rays=1024,
        upscale_iters=(200, 400, 600),
        half_precision_last=100,
        checkpoint_every=500,
    )
    base.update(kw)
    return TrainConfig(**base)
