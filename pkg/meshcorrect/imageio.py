"""Binary image records for feature stacks, labels and masks, plus 8-bit PGM previews.

A file is a sequence of records. Each record is a little-endian header
``magic(4) version(u16) dtype(u8) pad(1) channels(u32) height(u32) width(u32)``
followed by the row-major payload.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera_geometry import Intrinsics, RigidTransform
from .errors import DataError
from .rasterizer import FEATURE_CHANNELS, MeshFeatureStack

MAGIC = b"MCFI"
VERSION = 1
_HEADER = struct.Struct("<4sHBxIII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<u8")}
_CODES = {np.dtype("<f4"): 1, np.dtype("<u8"): 2}
_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+255\s")


def _as_record(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype.kind in "ui" and array.dtype.itemsize == 8:
        array = array.astype("<u8")
    else:
        array = array.astype("<f4")
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise ValueError(f"image records are (C, H, W) or (H, W), got shape {array.shape}")
    return np.ascontiguousarray(array)


@dataclass(eq=False)
class FloatImageFile:
    """Ordered image records; 2-D arrays are stored as one channel."""

    records: list[np.ndarray] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        chunks = []
        for array in self.records:
            rec = _as_record(array)
            c, h, w = rec.shape
            chunks.append(_HEADER.pack(MAGIC, VERSION, _CODES[rec.dtype], c, h, w))
            chunks.append(rec.tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "FloatImageFile":
        records: list[np.ndarray] = []
        offset = 0
        while offset < len(raw):
            if len(raw) - offset < _HEADER.size:
                raise DataError(f"{source}: truncated record header at byte {offset}")
            magic, version, code, c, h, w = _HEADER.unpack_from(raw, offset)
            if magic != MAGIC:
                raise DataError(f"{source}: bad magic {magic!r} at byte {offset}")
            if version != VERSION:
                raise DataError(f"{source}: unsupported image version {version}")
            if code not in _DTYPES:
                raise DataError(f"{source}: unknown dtype code {code}")
            dtype = _DTYPES[code]
            offset += _HEADER.size
            nbytes = c * h * w * dtype.itemsize
            if len(raw) - offset < nbytes:
                raise DataError(f"{source}: payload holds {len(raw) - offset} bytes, expected {nbytes}")
            data = np.frombuffer(raw, dtype=dtype, count=c * h * w, offset=offset).reshape(c, h, w)
            records.append(data.copy())
            offset += nbytes
        return cls(records)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path: str | Path) -> "FloatImageFile":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read image file {path}: {exc}") from exc
        return cls.from_bytes(raw, str(path))


def write_image(path: str | Path, image: np.ndarray) -> None:
    FloatImageFile([image]).write(path)


def read_image(path: str | Path) -> np.ndarray:
    """Single-record file; one-channel images come back as (H, W)."""
    records = FloatImageFile.read(path).records
    if len(records) != 1:
        raise DataError(f"{path}: expected one image record, found {len(records)}")
    image = records[0]
    return image[0] if image.shape[0] == 1 else image


def write_stack(path: str | Path, stack: MeshFeatureStack) -> None:
    FloatImageFile([stack.channels(), stack.triangle_id]).write(path)


def read_stack(path: str | Path, camera: Intrinsics, pose: RigidTransform) -> MeshFeatureStack:
    records = FloatImageFile.read(path).records
    if len(records) != 2 or records[0].shape[0] != len(FEATURE_CHANNELS) or records[1].dtype != np.dtype("<u8"):
        raise DataError(f"{path}: not a feature-stack file")
    if records[0].shape[1:] != camera.shape:
        raise DataError(f"{path}: stack size {records[0].shape[1:]} does not match camera {camera.shape}")
    return MeshFeatureStack.from_channels(records[0], records[1][0], camera, pose)


def to_preview(image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Min-max scale to 8 bits over ``mask`` (all pixels by default); pixels outside are 0."""
    image = np.asarray(image, dtype=np.float64)
    if mask is None:
        mask = np.isfinite(image)
    mask = np.asarray(mask, dtype=bool) & np.isfinite(image)
    out = np.zeros(image.shape, dtype=np.uint8)
    if not mask.any():
        return out
    lo, hi = float(image[mask].min()), float(image[mask].max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    out[mask] = np.clip(np.round((image[mask] - lo) * scale), 0, 255).astype(np.uint8)
    if hi == lo:
        out[mask] = 255
    return out


def write_pgm(path: str | Path, image: np.ndarray, mask: np.ndarray | None = None) -> None:
    pixels = image if np.asarray(image).dtype == np.uint8 else to_preview(image, mask)
    h, w = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = _PGM_HEADER.match(raw)
    if header is None:
        raise DataError(f"{path}: not an 8-bit binary PGM")
    w, h = int(header.group(1)), int(header.group(2))
    payload = raw[header.end() : header.end() + w * h]
    if len(payload) != w * h:
        raise DataError(f"{path}: truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
