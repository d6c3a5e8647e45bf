"""Video tensors, masks and the STV1 on-disk format.

A video is a float64 ``numpy`` array of shape ``(channels, height, width,
frames)``.  A mask is a uint8 array of shape ``(1, height, width, frames)``
holding 1 for observed coordinates and 0 for occluded ones.

On disk (STV1) the payload is frame-major: for each frame, each channel,
rows top to bottom, columns left to right.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

MAGIC = b"STV1"
HEADER = struct.Struct("<4s5I")
DTYPE_U8 = 0
DTYPE_F32 = 1
_DTYPES = {DTYPE_U8: np.dtype("u1"), DTYPE_F32: np.dtype("<f4")}


class ShapeError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class StvHeader(NamedTuple):
    channels: int
    height: int
    width: int
    frames: int
    dtype: int

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.height, self.width, self.frames)


def zeros(channels: int, height: int, width: int, frames: int) -> np.ndarray:
    return np.zeros((channels, height, width, frames))


def as_video(data) -> np.ndarray:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 4:
        raise ShapeError(f"video must be 4-D (channels, height, width, frames), got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("video contains non-finite values")
    return v


def as_mask(data, like: np.ndarray | None = None) -> np.ndarray:
    """Validate a binary mask; optionally check it aligns with video ``like``."""
    m = np.asarray(data)
    if m.ndim == 3:
        m = m[None]
    if m.ndim != 4 or m.shape[0] != 1:
        raise ShapeError(f"mask must have shape (1, height, width, frames), got {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    if like is not None and m.shape[1:] != like.shape[-3:]:
        raise ShapeError(f"mask {m.shape[1:]} does not match video {like.shape[-3:]}")
    return m.astype(np.uint8)


def sq_norm(v: np.ndarray) -> float:
    """Sum of squared elements, accumulated in flat index order."""
    flat = np.ascontiguousarray(v, dtype=np.float64).ravel()
    return float(np.sum(flat * flat))


def inner(u: np.ndarray, v: np.ndarray) -> float:
    if u.shape != v.shape:
        raise ShapeError(f"shape mismatch {u.shape} vs {v.shape}")
    return float(np.sum(np.ascontiguousarray(u).ravel() * np.ascontiguousarray(v).ravel()))


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    return a * x + y


# -- STV1 -----------------------------------------------------------------

def _to_payload(v: np.ndarray) -> np.ndarray:
    # (C, H, W, T) -> (T, C, H, W)
    return np.ascontiguousarray(np.moveaxis(v, 3, 0))


def _from_payload(p: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(p, 0, 3))


def encode_stv(v: np.ndarray, dtype: str = "f32") -> bytes:
    v = np.asarray(v)
    if v.ndim != 4:
        raise ShapeError(f"expected a 4-D video, got shape {v.shape}")
    if dtype == "f32":
        flag, payload = DTYPE_F32, _to_payload(v).astype("<f4")
    elif dtype == "u8":
        if np.any((v < 0) | (v > 255)) or np.any(v != np.round(v)):
            raise ValueError("u8 export requires integer values in [0, 255]")
        flag, payload = DTYPE_U8, _to_payload(v).astype("u1")
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")
    return HEADER.pack(MAGIC, *v.shape, flag) + payload.tobytes()


def decode_stv(buf: bytes) -> tuple[StvHeader, np.ndarray]:
    if len(buf) < HEADER.size:
        raise FormatError("truncated header", len(buf))
    header = _check_header(buf)
    c, h, w, t, flag = header
    dt = _DTYPES[flag]
    need = c * h * w * t * dt.itemsize
    have = len(buf) - HEADER.size
    if have < need:
        raise FormatError(f"truncated payload: expected {need} bytes, found {have}", len(buf))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", HEADER.size + need)
    payload = np.frombuffer(buf, dtype=dt, count=c * h * w * t, offset=HEADER.size)
    return header, _from_payload(payload.reshape(t, c, h, w))


def read_stv_header(path) -> StvHeader:
    with open(path, "rb") as fh:
        buf = fh.read(HEADER.size)
    if len(buf) < HEADER.size:
        raise FormatError("truncated header", len(buf))
    return _check_header(buf)


def _check_header(buf: bytes) -> StvHeader:
    magic, c, h, w, t, flag = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if flag not in _DTYPES:
        raise FormatError(f"unsupported dtype flag {flag}", 20)
    return StvHeader(c, h, w, t, flag)


def read_stv(path) -> np.ndarray:
    """Read an STV1 file as a float64 video (u8 values are kept as 0..255)."""
    _, data = decode_stv(Path(path).read_bytes())
    return data.astype(np.float64)


def read_mask(path) -> np.ndarray:
    """Read an STV1 mask (channels=1, u8 values 0 or 255; 255 means observed)."""
    header, data = decode_stv(Path(path).read_bytes())
    if header.channels != 1 or header.dtype != DTYPE_U8:
        raise FormatError("mask must be single-channel u8", 4)
    if not np.all((data == 0) | (data == 255)):
        raise FormatError("mask values must be 0 or 255", HEADER.size)
    return (data == 255).astype(np.uint8)


def write_stv(v: np.ndarray, path, dtype: str = "f32") -> None:
    _atomic_write(path, encode_stv(v, dtype))


def write_mask(mask: np.ndarray, path) -> None:
    m = as_mask(mask)
    _atomic_write(path, encode_stv(m.astype(np.uint8) * 255, "u8"))


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- PGM / PPM frame directories ------------------------------------------

def to_u8(v: np.ndarray) -> tuple[np.ndarray, int]:
    """Round and clamp to [0, 255]; returns the array and the number of clamped values."""
    r = np.round(v)
    clamped = int(np.count_nonzero((r < 0) | (r > 255)))
    return np.clip(r, 0, 255).astype(np.uint8), clamped


def export_frames(v: np.ndarray, directory) -> list[Path]:
    """Write each frame as ``frame_%04d.pgm`` (1 channel) or ``.ppm`` (3 channels)."""
    c = v.shape[0]
    if c not in (1, 3):
        raise ShapeError(f"frame export needs 1 or 3 channels, got {c}")
    u8, _ = to_u8(v)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kind, ext = (b"P5", "pgm") if c == 1 else (b"P6", "ppm")
    h, w = v.shape[1:3]
    paths = []
    for t in range(v.shape[3]):
        frame = np.ascontiguousarray(np.moveaxis(u8[..., t], 0, -1))  # (H, W, C)
        path = directory / f"frame_{t:04d}.{ext}"
        path.write_bytes(kind + b"\n%d %d\n255\n" % (w, h) + frame.tobytes())
        paths.append(path)
    return paths


def _parse_netpbm(buf: bytes, name: str) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{name}: truncated header", pos)
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte after maxval
    kind, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if kind not in (b"P5", b"P6"):
        raise FormatError(f"{name}: unsupported netpbm kind {kind!r}", 0)
    if maxval != 255:
        raise FormatError(f"{name}: only maxval 255 is supported", 0)
    c = 1 if kind == b"P5" else 3
    need = w * h * c
    if len(buf) - pos < need:
        raise FormatError(f"{name}: truncated pixel data", len(buf))
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    return np.moveaxis(pix, -1, 0)


def import_frames(directory) -> np.ndarray:
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir()
                   if p.name.startswith("frame_") and p.suffix in (".pgm", ".ppm"))
    if not files:
        raise FormatError(f"no frame_####.pgm/ppm files in {directory}", 0)
    frames = [_parse_netpbm(p.read_bytes(), p.name) for p in files]
    if len({f.shape for f in frames}) != 1:
        raise ShapeError("frames have inconsistent sizes")
    return np.stack(frames, axis=-1).astype(np.float64)
