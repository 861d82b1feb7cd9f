"""D-NeRF style datasets and analytic synthetic dynamic scenes.

A synthetic scene is a list of constant-density primitives (spheres, boxes)
whose centers move along polynomial or sinusoidal trajectories in ``t``, plus
optional static fields that are trilinear over the scene box.  Ground-truth
images come from dense midpoint quadrature of the emission-absorption integral.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DatasetError, SpecError
from .renderer import Camera, generate_rays
from .voxels import VoxelGrid

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class FrameRecord:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    pose: np.ndarray  # (4, 4) camera-to-world
    focal: float
    time: float
    name: str = ""

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise DatasetError(f"pose must be 4x4, got {self.pose.shape}", self.name or None)
        rot = self.pose[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-4):
            raise DatasetError("pose rotation block is not orthonormal", self.name or None)
        self.time = float(min(max(self.time, 0.0), 1.0))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def camera(self) -> Camera:
        return Camera(self.pose, self.focal, self.height, self.width)


@dataclass
class Dataset:
    splits: dict
    bbox: tuple = None  # scene box if the dataset declares one
    near: float = 2.0
    far: float = 6.0

    def __getitem__(self, split):
        return self.splits.get(split, [])


# -- loading -----------------------------------------------------------------
def _read_image(path: Path, background: str, frame: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable image {path}: {exc}", frame) from None
    arr = arr.astype(np.float32) / 255.0
    if arr.shape[-1] == 4:
        rgb, a = arr[..., :3], arr[..., 3:]
        bg = 1.0 if background == "white" else 0.0
        arr = rgb * a + bg * (1 - a)
    return arr


def _number(v, what, frame=None) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise DatasetError(f"{what} must be a finite number, got {v!r}", frame)
    return float(v)


def load_dnerf(root, background="black", splits=SPLITS) -> Dataset:
    """Load ``transforms_{split}.json`` files and their images from ``root``."""
    root = Path(root)
    out, bbox, near, far = {}, None, 2.0, 6.0
    for split in splits:
        path = root / f"transforms_{split}.json"
        if not path.exists():
            if split == "train":
                raise DatasetError(f"missing {path.name}")
            log.warning("no %s split in %s", split, root)
            out[split] = []
            continue
        try:
            meta = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path.name} is not valid JSON: {exc}") from None
        if not isinstance(meta, dict):
            raise DatasetError(f"{path.name} must hold a JSON object")
        if "camera_angle_x" not in meta:
            raise DatasetError(f"{path.name} missing key 'camera_angle_x'")
        if not isinstance(meta.get("frames"), list):
            raise DatasetError(f"{path.name} missing key 'frames'")
        angle = _number(meta["camera_angle_x"], f"{path.name} camera_angle_x")
        if not 0 < angle < math.pi:
            raise DatasetError(f"{path.name} camera_angle_x must lie in (0, pi), got {angle}")
        if "scene_bbox" in meta:
            raw = meta["scene_bbox"]
            if not isinstance(raw, list) or len(raw) != 6:
                raise DatasetError(f"{path.name} scene_bbox must be a list of 6 numbers")
            bbox = tuple(_number(v, f"{path.name} scene_bbox") for v in raw)
        near = _number(meta.get("near", near), f"{path.name} near")
        far = _number(meta.get("far", far), f"{path.name} far")
        frames = []
        for i, fr in enumerate(meta["frames"]):
            name = f"{split}[{i}]"
            if not isinstance(fr, dict):
                raise DatasetError("frame entry must be an object", name)
            for key in ("file_path", "transform_matrix"):
                if key not in fr:
                    raise DatasetError(f"missing key {key!r}", name)
            fname = fr["file_path"]
            if not isinstance(fname, str):
                raise DatasetError("file_path must be a string", name)
            name = f"{split}[{i}]:{fname}"
            try:
                pose = np.asarray(fr["transform_matrix"], dtype=np.float64)
            except (TypeError, ValueError):
                raise DatasetError("transform_matrix is not numeric", name) from None
            if pose.shape != (4, 4):
                raise DatasetError(f"transform_matrix must be 4x4, got shape {pose.shape}", name)
            if "time" in fr:
                t = _number(fr["time"], "time", name)
            else:
                log.warning("frame %s has no time; using 0.0", name)
                t = 0.0
            ipath = root / fname
            if not ipath.suffix:
                ipath = ipath.with_suffix(".png")
            img = _read_image(ipath, background, name)
            focal = 0.5 * img.shape[1] / math.tan(0.5 * angle)
            frames.append(FrameRecord(img, pose, focal, t, name))
        out[split] = frames
    return Dataset(out, bbox, near, far)


def frustum_bbox(frames, near, far, inflate=0.05) -> tuple:
    """Axis-aligned box around all camera frusta between ``near`` and ``far``, grown by ``inflate``."""
    pts = []
    for fr in frames:
        H, W, f = fr.height, fr.width, fr.focal
        for u, v in ((0, 0), (W, 0), (0, H), (W, H)):
            d = np.array([(u - W / 2) / f, -(v - H / 2) / f, -1.0])
            for depth in (near, far):
                pts.append(fr.pose[:3, :3] @ (d * depth) + fr.pose[:3, 3])
    pts = np.array(pts)
    lo, hi = pts.min(0), pts.max(0)
    c, half = (lo + hi) / 2, (hi - lo) / 2 * (1 + inflate)
    return tuple(float(v) for v in np.concatenate([c - half, c + half]))


# -- synthetic scenes --------------------------------------------------------
@dataclass
class Trajectory:
    kind: str = "poly"
    coeffs: list = None  # poly: [c0, c1, ...] each a 3-vector
    base: list = None  # sin: base + amp * sin(2 pi freq t + phase)
    amp: list = None
    freq: float = 1.0
    phase: float = 0.0

    @classmethod
    def parse(cls, obj):
        if isinstance(obj, (list, tuple)):
            return cls("poly", [list(map(float, obj))])
        kind = obj.get("kind", "poly")
        if kind == "poly":
            return cls("poly", [list(map(float, c)) for c in obj["coeffs"]])
        if kind == "sin":
            return cls("sin", None, list(map(float, obj["base"])), list(map(float, obj["amp"])),
                       float(obj.get("freq", 1.0)), float(obj.get("phase", 0.0)))
        raise SpecError(f"unknown trajectory kind {kind!r}")

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == "poly":
            return sum(np.asarray(c) * t**k for k, c in enumerate(self.coeffs))
        return np.asarray(self.base) + np.asarray(self.amp) * math.sin(2 * math.pi * self.freq * t + self.phase)

    def to_json(self):
        if self.kind == "poly":
            return {"kind": "poly", "coeffs": self.coeffs}
        return {"kind": "sin", "base": self.base, "amp": self.amp, "freq": self.freq, "phase": self.phase}


@dataclass
class Primitive:
    type: str
    density: float = 0.0
    albedo: tuple = (1.0, 1.0, 1.0)
    center: Trajectory = None
    radius: float = 0.0
    half_size: tuple = None
    density_corners: list = None  # trilinear: 8 values, corner (i,j,k) at index 4i+2j+k
    color_corners: list = None

    def extent(self) -> np.ndarray:
        if self.type == "sphere":
            return np.full(3, self.radius)
        return np.asarray(self.half_size, dtype=float)

    def eval(self, p: np.ndarray, t: float, lo, hi):
        """Density (P,) and color (P, 3) at points ``p``."""
        if self.type == "trilinear":
            u = (p - lo) / (hi - lo)
            inside = np.all((u >= 0) & (u <= 1), axis=-1)
            u = np.clip(u, 0, 1)
            w = np.stack([
                (u[:, 0] if i else 1 - u[:, 0]) * (u[:, 1] if j else 1 - u[:, 1]) * (u[:, 2] if k else 1 - u[:, 2])
                for i in (0, 1) for j in (0, 1) for k in (0, 1)
            ], axis=-1)
            dens = w @ np.asarray(self.density_corners, dtype=float) * inside
            col = w @ np.asarray(self.color_corners, dtype=float)
            return dens, col
        c = self.center(t)
        if self.type == "sphere":
            inside = np.sum((p - c) ** 2, axis=-1) <= self.radius**2
        else:
            inside = np.all(np.abs(p - c) <= np.asarray(self.half_size), axis=-1)
        dens = np.where(inside, self.density, 0.0)
        return dens, np.broadcast_to(np.asarray(self.albedo, dtype=float), p.shape)

    def to_json(self):
        if self.type == "trilinear":
            return {"type": "trilinear", "density_corners": self.density_corners, "color_corners": self.color_corners}
        d = {"type": self.type, "density": self.density, "albedo": list(self.albedo), "center": self.center.to_json()}
        if self.type == "sphere":
            d["radius"] = self.radius
        else:
            d["half_size"] = list(self.half_size)
        return d


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)
    bbox: tuple = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
    background: str = "black"
    camera_radius: float = 4.0
    camera_angle_x: float = 0.6
    elevation_range: tuple = (-0.3, 1.0)  # radians
    test_cameras: int = None

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        if len(self.bbox) != 6 or any(self.bbox[i] >= self.bbox[i + 3] for i in range(3)):
            raise SpecError(f"bad bbox {self.bbox}")
        if self.background not in ("black", "white"):
            raise SpecError(f"background must be black or white, got {self.background!r}")
        lo, hi = np.asarray(self.bbox[:3]), np.asarray(self.bbox[3:])
        for i, prim in enumerate(self.primitives):
            if prim.type not in ("sphere", "box", "trilinear"):
                raise SpecError(f"primitive {i}: unknown type {prim.type!r}")
            if prim.type == "trilinear":
                if len(prim.density_corners) != 8 or np.asarray(prim.color_corners).shape != (8, 3):
                    raise SpecError(f"primitive {i}: trilinear field needs 8 densities and 8 colors")
                continue
            if prim.density < 0:
                raise SpecError(f"primitive {i}: negative density")
            ext = prim.extent()
            for t in np.linspace(0, 1, 201):
                c = prim.center(float(t))
                if np.any(c - ext < lo) or np.any(c + ext > hi):
                    raise SpecError(f"primitive {i} leaves the scene box at t={t:.3f}")

    @classmethod
    def from_json(cls, obj) -> "SceneSpec":
        try:
            prims = []
            for p in obj.get("primitives", []):
                kind = p["type"]
                if kind == "trilinear":
                    prims.append(Primitive("trilinear", density_corners=[float(v) for v in p["density_corners"]],
                                           color_corners=[[float(c) for c in v] for v in p["color_corners"]]))
                else:
                    prims.append(Primitive(kind, float(p["density"]), tuple(float(c) for c in p["albedo"]),
                                           Trajectory.parse(p["center"]), float(p.get("radius", 0.0)),
                                           tuple(float(c) for c in p["half_size"]) if "half_size" in p else None))
            kw = {k: obj[k] for k in ("bbox", "background", "camera_radius", "camera_angle_x",
                                      "elevation_range", "test_cameras") if k in obj}
            return cls(prims, **kw)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"malformed scene spec: {exc!r}") from None

    @classmethod
    def load(cls, path) -> "SceneSpec":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read scene spec {path}: {exc}") from None
        return cls.from_json(obj)

    def to_json(self):
        return {"primitives": [p.to_json() for p in self.primitives], "bbox": list(self.bbox),
                "background": self.background, "camera_radius": self.camera_radius,
                "camera_angle_x": self.camera_angle_x, "elevation_range": list(self.elevation_range),
                "test_cameras": self.test_cameras}

    def fields(self, p: np.ndarray, t: float):
        """Total density and density-weighted color at ``p`` (P, 3)."""
        lo, hi = np.asarray(self.bbox[:3]), np.asarray(self.bbox[3:])
        dens = np.zeros(p.shape[0])
        col = np.zeros((p.shape[0], 3))
        for prim in self.primitives:
            d, c = prim.eval(p, t, lo, hi)
            dens += d
            col += d[:, None] * c
        col = np.where(dens[:, None] > 0, col / np.maximum(dens, 1e-300)[:, None], 0.0)
        return dens, col

    @property
    def diagonal(self) -> float:
        lo, hi = np.asarray(self.bbox[:3]), np.asarray(self.bbox[3:])
        return float(np.linalg.norm(hi - lo))


def moving_sphere_spec(**kw) -> SceneSpec:
    """Desk-scale scene: a sphere sweeping across the box plus a static box."""
    prims = [
        Primitive("sphere", 25.0, (0.95, 0.35, 0.15), Trajectory("poly", [[-0.45, 0.0, 0.0], [0.9, 0.0, 0.0]]),
                  radius=0.4),
        Primitive("box", 25.0, (0.2, 0.6, 0.95), Trajectory("poly", [[0.0, 0.3, -0.55]]),
                  half_size=(0.5, 0.25, 0.2)),
    ]
    return SceneSpec(prims, **kw)


def paint_grid(spec: SceneSpec, resolution, t: float = 0.0, dtype=torch.float64) -> VoxelGrid:
    """Sample the spec's density and color at grid vertices into a 4-channel ``(sigma, r, g, b)`` grid.

    A trilinear-field spec is reproduced exactly by the grid's interpolation.
    """
    res = tuple(int(n) for n in resolution)
    lo, hi = np.asarray(spec.bbox[:3]), np.asarray(spec.bbox[3:])
    axes = [np.linspace(lo[i], hi[i], res[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    dens, col = spec.fields(pts, t)
    vals = np.concatenate([dens[:, None], col], 1).T.reshape(4, *res)
    return VoxelGrid(torch.as_tensor(vals, dtype=dtype), tuple(lo), tuple(hi), strides=(1,))


def oracle_render(spec: SceneSpec, camera: Camera, t: float, step=None, chunk=256) -> np.ndarray:
    """Ground-truth image by midpoint quadrature of the emission-absorption integral.

    ``step`` defaults to 1/1000 of the scene-box diagonal.
    """
    step = spec.diagonal / 1000 if step is None else step
    origins, dirs = generate_rays(camera, torch.float64)
    o_all, d_all = origins.numpy(), dirs.numpy()
    lo, hi = np.asarray(spec.bbox[:3]), np.asarray(spec.bbox[3:])
    bg = 1.0 if spec.background == "white" else 0.0
    out = np.zeros((o_all.shape[0], 3))
    for s in range(0, o_all.shape[0], chunk):
        o, d = o_all[s : s + chunk], d_all[s : s + chunk]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.where(np.abs(d) < 1e-12, 1e-12, d)
        ta, tb = (lo - o) * inv, (hi - o) * inv
        t0 = np.maximum(np.minimum(ta, tb).max(-1), 0.0)
        t1 = np.maximum(ta, tb).min(-1)
        length = np.where(t1 > t0, t1 - t0, 0.0)
        n = np.ceil(length / step).astype(int)
        S = int(n.max()) if n.size else 0
        if S == 0:
            out[s : s + chunk] = bg
            continue
        k = np.arange(S)
        valid = k[None, :] < n[:, None]
        # n equal sub-intervals per ray, sampled at midpoints
        h = np.where(n > 0, length / np.maximum(n, 1), 0.0)
        tt = t0[:, None] + (k[None, :] + 0.5) * h[:, None]
        pts = o[:, None, :] + tt[..., None] * d[:, None, :]
        dens, col = spec.fields(pts.reshape(-1, 3), t)
        dens = dens.reshape(valid.shape) * valid
        col = col.reshape(*valid.shape, 3)
        tau = dens * h[:, None]
        acc = np.cumsum(tau, axis=1)
        w = np.exp(-(acc - tau)) * -np.expm1(-tau)
        c = np.einsum("rs,rsc->rc", w, col)
        out[s : s + chunk] = c + bg * np.exp(-acc[:, -1])[:, None]
    return out.reshape(camera.height, camera.width, 3)


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    position = np.asarray(position, dtype=float)
    z = position - np.asarray(target, dtype=float)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=float), z)
    if np.linalg.norm(x) < 1e-9:  # looking along the up axis
        x = np.cross((0.0, 1.0, 0.0), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, position
    return pose


def write_png(path, img: np.ndarray):
    """Write an (H, W, 3) image in [0, 1] as 8-bit RGB PNG, atomically."""
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def synth_scene(spec: SceneSpec, out_dir, cameras=20, resolution=(64, 64), seed=0) -> Path:
    """Render ``spec`` to a D-NeRF-layout dataset under ``out_dir``.

    Training cameras get evenly spaced times in [0, 1]; val/test cameras sit at
    new positions and at times between the training times.
    """
    W, H = resolution
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_test = spec.test_cameras if spec.test_cameras is not None else max(2, cameras // 4)
    focal = 0.5 * W / math.tan(0.5 * spec.camera_angle_x)
    counts = {"train": cameras, "val": n_test, "test": n_test}
    half_diag = spec.diagonal / 2
    for split in SPLITS:
        n = counts[split]
        if split == "train":
            times = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(n)
        else:
            times = (np.arange(n) + 0.5) / n
        (out / split).mkdir(exist_ok=True)
        frames = []
        for i in range(n):
            az = rng.uniform(0, 2 * math.pi)
            el = rng.uniform(*spec.elevation_range)
            r = spec.camera_radius
            pos = [r * math.cos(el) * math.cos(az), r * math.cos(el) * math.sin(az), r * math.sin(el)]
            pose = look_at(pos)
            t = float(times[i])
            img = oracle_render(spec, Camera(pose, focal, H, W), t)
            fname = f"{split}/r_{i:03d}"
            write_png(out / f"{fname}.png", img)
            frames.append({"file_path": f"./{fname}", "time": t, "transform_matrix": pose.tolist()})
        meta = {
            "camera_angle_x": spec.camera_angle_x,
            "scene_bbox": list(spec.bbox),
            "near": max(spec.camera_radius - half_diag, 0.0),
            "far": spec.camera_radius + half_diag,
            "frames": frames,
        }
        atomic_write_text(out / f"transforms_{split}.json", json.dumps(meta, indent=2))
    return out


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())
