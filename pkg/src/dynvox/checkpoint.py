"""Binary checkpoints: config, iteration, voxel grid, network weights, optimizer and RNG state.

Layout (little-endian)::

    "TNVC" | version u32 | iteration u64
    config_len u32 | config text (utf-8) | sha256(config text) 32 bytes
    grid block ("TNVX" ..., see voxels.grid_to_bytes)
    n_layers u32 | per layer: name_len u16, name, dtype u8, out u32, in u32, weight, bias
    has_optim u8 | per group: id_len u16, id, step u64, n u32,
                   per tensor: name_len u16, name, dtype u8, ndim u32, dims u32..., m, v
    rng_len u32 | rng state (JSON)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .config import TrainConfig
from .datasets import atomic_write_bytes
from .errors import CheckpointError
from .model import DynamicField
from .optim import ParamGroup
from .voxels import grid_from_bytes, grid_to_bytes

MAGIC = b"TNVC"
VERSION = 1
_TAGS = {torch.float32: (0, "<f4"), torch.float64: (2, "<f8")}
_CODES = {0: "<f4", 2: "<f8"}


@dataclass
class Checkpoint:
    model: DynamicField
    iteration: int
    groups: dict = None
    rng_state: dict = None


def _name(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def _tensor(t: torch.Tensor) -> bytes:
    tag, code = _TAGS[t.dtype]
    return t.contiguous().numpy().astype(code, copy=False).tobytes()


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def unpack(self, fmt):
        try:
            vals = struct.unpack_from(fmt, self.buf, self.pos)
        except struct.error:
            raise CheckpointError("truncated checkpoint") from None
        self.pos += struct.calcsize(fmt)
        return vals if len(vals) > 1 else vals[0]

    def bytes(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def name(self):
        return self.bytes(self.unpack("<H")).decode()

    def array(self, tag, shape):
        code = _CODES.get(tag)
        if code is None:
            raise CheckpointError(f"unknown tensor dtype tag {tag}")
        n = int(np.prod(shape)) if shape else 1
        raw = self.bytes(n * np.dtype(code).itemsize)
        arr = np.frombuffer(raw, dtype=code).reshape(shape)
        return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))


def checkpoint_bytes(model: DynamicField, iteration: int, groups=None, rng_state=None) -> bytes:
    text = model.config.to_text().encode()
    out = [MAGIC, struct.pack("<IQ", VERSION, iteration), struct.pack("<I", len(text)), text,
           hashlib.sha256(text).digest(), grid_to_bytes(model.grid)]
    layers = model.named_layers()
    out.append(struct.pack("<I", len(layers)))
    for name, layer in layers:
        tag = _TAGS[layer.weight.dtype][0]
        out += [_name(name), struct.pack("<BII", tag, layer.out_dim, layer.in_dim),
                _tensor(layer.weight), _tensor(layer.bias)]
    if groups is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<I", len(groups)))
        for gid, g in groups.items():
            out += [_name(gid), struct.pack("<QI", g.step_count, len(g.m))]
            for pname, m in g.m.items():
                v = g.v[pname]
                out += [_name(pname), struct.pack("<BI", _TAGS[m.dtype][0], m.dim()),
                        struct.pack(f"<{m.dim()}I", *m.shape), _tensor(m), _tensor(v)]
    rng = json.dumps(rng_state, sort_keys=True).encode() if rng_state is not None else b""
    out += [struct.pack("<I", len(rng)), rng]
    return b"".join(out)


def save_checkpoint(model: DynamicField, path, iteration: int = 0, groups=None, rng_state=None):
    atomic_write_bytes(path, checkpoint_bytes(model, iteration, groups, rng_state))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return parse_checkpoint(buf)


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    r = _Reader(buf)
    r.pos = 4
    version, iteration = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    text = r.bytes(r.unpack("<I"))
    if r.bytes(32) != hashlib.sha256(text).digest():
        raise CheckpointError("config hash mismatch")
    config = TrainConfig.from_text(text.decode())
    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    grid, r.pos = grid_from_bytes(buf, r.pos, working_dtype=dtype)
    model = DynamicField(config, bbox=grid.bbox_min + grid.bbox_max, resolution=grid.resolution)
    model.grid = grid
    layers = dict(model.named_layers())
    n = r.unpack("<I")
    if n != len(layers):
        raise CheckpointError(f"checkpoint has {n} layers, model expects {len(layers)}")
    for _ in range(n):
        name = r.name()
        tag, out_dim, in_dim = r.unpack("<BII")
        layer = layers.get(name)
        if layer is None or (layer.out_dim, layer.in_dim) != (out_dim, in_dim):
            raise CheckpointError(f"layer {name!r} does not match the config")
        layer.weight = r.array(tag, (out_dim, in_dim))
        layer.bias = r.array(tag, (out_dim,))
        layer.zero_grad()
    groups = None
    if r.unpack("<B"):
        groups = {}
        for _ in range(r.unpack("<I")):
            gid = r.name()
            step, count = r.unpack("<QI")
            g = ParamGroup(gid, 0.0, (config.beta1, config.beta2), config.adam_eps, step_count=step)
            for _ in range(count):
                pname = r.name()
                tag, ndim = r.unpack("<BI")
                shape = tuple(struct.unpack_from(f"<{ndim}I", buf, r.pos)) if ndim else ()
                r.pos += 4 * ndim
                g.m[pname] = r.array(tag, shape)
                g.v[pname] = r.array(tag, shape)
            groups[gid] = g
        base = {"voxels": config.lr_voxels, "deform_net": config.lr_deform, "other_mlps": config.lr_other}
        for gid, g in groups.items():
            g.base_lr = base.get(gid, 0.0)
    rng_raw = r.bytes(r.unpack("<I"))
    rng_state = json.loads(rng_raw) if rng_raw else None
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(model, iteration, groups, rng_state)
