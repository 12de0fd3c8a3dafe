"""Binary ``DPGS`` checkpoints.

Layout (little-endian)::

    b"DPGS"  u32 version  u32 count  u32 sh_degree
    count x float32 record: mu(3) rot(4) log_scale(3) opacity_logit(1) sh(K*3) brightness(1) cat_logits(3)
    u32 n_tensors
    n_tensors x { u16 name_len, name utf-8, u32 ndim, u32 dims[ndim], float32 data }
    u32 meta_len, meta JSON utf-8

Tensors carry the deformation network and the optimizer moments; the JSON
block holds the step counter, per-tensor Adam step counts and configuration.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GaussianScene, num_sh_coeffs
from .errors import FormatError, IoError
from .io import atomic_write

MAGIC = b"DPGS"
VERSION = 1

_RECORD_FIELDS = ("mu", "rot", "log_scale", "opacity_logit", "sh", "brightness", "cat_logits")


@dataclass
class Checkpoint:
    scene: GaussianScene
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def record_width(sh_degree: int) -> int:
    return 3 + 4 + 3 + 1 + 3 * num_sh_coeffs(sh_degree) + 1 + 3


def scene_to_records(scene: GaussianScene) -> np.ndarray:
    n = len(scene)
    cols = [np.asarray(getattr(scene, name), dtype=np.float32).reshape(n, -1) for name in _RECORD_FIELDS]
    return np.concatenate(cols, axis=1)


def records_to_scene(rec: np.ndarray, sh_degree: int, time_range=(0.0, 1.0)) -> GaussianScene:
    n = len(rec)
    k = num_sh_coeffs(sh_degree)
    widths = {"mu": 3, "rot": 4, "log_scale": 3, "opacity_logit": 1, "sh": 3 * k,
              "brightness": 1, "cat_logits": 3}
    out, col = {}, 0
    for name in _RECORD_FIELDS:
        w = widths[name]
        block = np.ascontiguousarray(rec[:, col:col + w])
        col += w
        if name in ("opacity_logit", "brightness"):
            block = block[:, 0].copy()
        elif name == "sh":
            block = block.reshape(n, k, 3)
        out[name] = block
    return GaussianScene(**out, sh_degree=sh_degree, time_range=tuple(time_range))


def dumps(ckpt: Checkpoint) -> bytes:
    scene = ckpt.scene
    parts = [MAGIC, struct.pack("<III", VERSION, len(scene), scene.sh_degree)]
    parts.append(scene_to_records(scene).astype("<f4").tobytes())
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    meta = dict(ckpt.meta)
    meta.setdefault("time_range", list(scene.time_range))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count, sh_degree = r.unpack("<III")
    if version != VERSION:
        raise FormatError(f"{source}: checkpoint version {version} is not supported "
                          f"(this build reads version {VERSION})")
    if count == 0 or sh_degree > 3:
        raise FormatError(f"{source}: invalid header (count={count}, sh_degree={sh_degree})")
    width = record_width(sh_degree)
    rec = np.frombuffer(r.take(4 * width * count), dtype="<f4").reshape(count, width).astype(np.float32)
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: corrupt tensor name") from exc
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt metadata block") from exc
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes after checkpoint")
    scene = records_to_scene(rec, sh_degree, meta.get("time_range", (0.0, 1.0)))
    return Checkpoint(scene, tensors, meta)


def save(path, ckpt: Checkpoint) -> None:
    with atomic_write(path) as fh:
        fh.write(dumps(ckpt))


def load(path) -> Checkpoint:
    p = Path(path)
    try:
        data = p.read_bytes()
    except FileNotFoundError as exc:
        raise IoError(f"checkpoint {p} does not exist") from exc
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {p}: {exc}") from exc
    return loads(data, str(p))
