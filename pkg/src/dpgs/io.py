"""File formats: ASCII PLY point clouds, PNG/PFM images and DPFL flow fields.

Every writer goes through a temporary file in the target directory followed by
``os.replace`` so readers never observe a half-written file.
"""

from __future__ import annotations

import contextlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, IoError

FLOW_MAGIC = b"DPFL"


@contextlib.contextmanager
def atomic_write(path: str | os.PathLike, mode: str = "wb"):
    """Yield a handle to a temp file that is renamed onto ``path`` on success."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing file {path}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# -- PLY ------------------------------------------------------------------------

def write_ply(path, xyz: np.ndarray, rgb: np.ndarray | None = None) -> None:
    """ASCII PLY with float x, y, z and uchar red, green, blue (rgb given in [0, 1])."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rgb = np.full_like(xyz, 0.5) if rgb is None else np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    cols = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.int64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(xyz)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    for p, c in zip(xyz, cols):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}")
    with atomic_write(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(xyz (N,3), rgb (N,3) in [0, 1])``. Extra properties are ignored."""
    text = _read_bytes(path).decode("ascii", errors="replace").splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    count = None
    props: list[str] = []
    in_vertex = False
    body = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = i + 1
            break
    if count is None or body is None:
        raise FormatError(f"{path}: malformed PLY header")
    missing = [p for p in ("x", "y", "z") if p not in props]
    if missing:
        raise FormatError(f"{path}: missing vertex properties {missing}")
    rows = [ln.split() for ln in text[body:body + count]]
    if len(rows) < count or any(len(r) < len(props) for r in rows):
        raise FormatError(f"{path}: truncated vertex data")
    try:
        data = np.array([[float(v) for v in r[:len(props)]] for r in rows]).reshape(count, len(props))
    except ValueError as exc:
        raise FormatError(f"{path}: bad vertex value ({exc})") from exc
    idx = {name: k for k, name in enumerate(props)}
    xyz = data[:, [idx["x"], idx["y"], idx["z"]]]
    if all(c in idx for c in ("red", "green", "blue")):
        rgb = data[:, [idx["red"], idx["green"], idx["blue"]]] / 255.0
    else:
        rgb = np.full_like(xyz, 0.5)
    return xyz, rgb


# -- images ---------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """8-bit PNG from a float image in [0, 1] (clamped); 2-D arrays become grayscale."""
    buf = to_uint8(img)
    with atomic_write(path) as fh:
        Image.fromarray(buf).save(fh, format="PNG")


def read_png(path) -> np.ndarray:
    """Float image in [0, 1]; RGB images are (H,W,3), grayscale (H,W)."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except FileNotFoundError as exc:
        raise FormatError(f"missing file {path}") from exc
    except OSError as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr.astype(np.float64) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    write_png(path, (np.asarray(mask) > 0).astype(np.float64))


def read_mask(path) -> np.ndarray:
    m = read_png(path)
    if m.ndim == 3:
        m = m[..., 0]
    return (m >= 0.5).astype(np.float64)


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    arr = np.asarray(img, dtype=np.float32)
    color = arr.ndim == 3
    h, w = arr.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    with atomic_write(path) as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = _read_bytes(path)
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise FormatError(f"{path}: not a PFM file")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PFM header") from exc
    chans = 3 if parts[0] == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * chans * 4
    if len(parts[3]) < need:
        raise FormatError(f"{path}: truncated PFM data")
    arr = np.frombuffer(parts[3][:need], dtype=dtype).astype(np.float32)
    arr = arr.reshape((h, w, 3) if chans == 3 else (h, w))
    return arr[::-1].copy()


# -- flow -----------------------------------------------------------------------

def write_flow(path, flow: np.ndarray) -> None:
    """``DPFL`` magic, u32 H, u32 W, then row-major little-endian float32 (u, v) pairs."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with atomic_write(path) as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", h, w))
        fh.write(flow.astype("<f4").tobytes())


def read_flow(path) -> np.ndarray:
    data = _read_bytes(path)
    if data[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad flow magic {data[:4]!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated flow header")
    h, w = struct.unpack("<II", data[4:12])
    need = h * w * 2 * 4
    if len(data) - 12 != need:
        raise FormatError(f"{path}: expected {need} bytes of flow data, found {len(data) - 12}")
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2).astype(np.float32)


# -- JSON -----------------------------------------------------------------------

def write_json(path, obj) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def read_json(path):
    try:
        return json.loads(_read_bytes(path).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
