"""Indexed triangle meshes, per-triangle features and world-frame triangle ids."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .camera_geometry import RigidTransform
from .errors import MeshFormatError

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
ID_QUANTUM = 1e-4
BACKGROUND_ID = 0

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def triangle_normal(v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """Unit normal ``normalize((v1 - v0) x (v2 - v0))``; broadcasts over leading axes."""
    v0, v1, v2 = (np.asarray(v, dtype=np.float64) for v in (v0, v1, v2))
    n = np.cross(v1 - v0, v2 - v0)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def triangle_area(v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> np.ndarray | float:
    v0, v1, v2 = (np.asarray(v, dtype=np.float64) for v in (v0, v1, v2))
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=-1)
    return float(area) if area.ndim == 0 else area


def edge_length_ratio(v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> np.ndarray | float:
    """Shortest over longest edge length."""
    v0, v1, v2 = (np.asarray(v, dtype=np.float64) for v in (v0, v1, v2))
    edges = np.stack(
        [
            np.linalg.norm(v1 - v0, axis=-1),
            np.linalg.norm(v2 - v1, axis=-1),
            np.linalg.norm(v0 - v2, axis=-1),
        ],
        axis=-1,
    )
    ratio = edges.min(axis=-1) / edges.max(axis=-1)
    return float(ratio) if ratio.ndim == 0 else ratio


def _swap_where(a: np.ndarray, b: np.ndarray, cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cond = cond[:, None]
    return np.where(cond, b, a), np.where(cond, a, b)


def _lex_greater(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    first = np.argmax(diff != 0, axis=1)
    return diff[np.arange(len(a)), first] > 0


def triangle_ids(corners: np.ndarray) -> np.ndarray:
    """FNV-1a ids of triangles given as (M, 3, 3) world-frame corner arrays.

    Corners are quantised to a 1e-4 m grid and sorted lexicographically before
    hashing, so the id does not depend on vertex order. Id 0 is reserved for
    background and remapped to 1.
    """
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 3, 3)
    if len(corners) == 0:
        return np.zeros(0, dtype=np.uint64)
    q = np.round(corners / ID_QUANTUM).astype(np.int64)
    a, b, c = q[:, 0], q[:, 1], q[:, 2]
    a, b = _swap_where(a, b, _lex_greater(a, b))
    b, c = _swap_where(b, c, _lex_greater(b, c))
    a, b = _swap_where(a, b, _lex_greater(a, b))
    ordered = np.ascontiguousarray(np.concatenate([a, b, c], axis=1).astype("<i8"))
    octets = ordered.view(np.uint8).reshape(len(ordered), -1)
    h = np.full(len(ordered), _FNV_OFFSET, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for col in range(octets.shape[1]):
            h ^= octets[:, col].astype(np.uint64)
            h *= _FNV_PRIME
    h[h == BACKGROUND_ID] = np.uint64(1)
    return h


def triangle_id(v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> int:
    return int(triangle_ids(np.stack([v0, v1, v2])[None])[0])


@dataclass(frozen=True)
class TriangleAttributes:
    normal: np.ndarray
    area: float
    edge_ratio: float
    id: int


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Triangle soup with world-frame vertices.

    Build through :meth:`from_arrays` (or :func:`load_obj`) to drop degenerate
    triangles; the constructor only validates.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    dropped: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise ValueError("TriangleMesh vertices must be finite")
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError("TriangleMesh triangle index out of range")
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    @classmethod
    def from_arrays(cls, vertices: np.ndarray, triangles: np.ndarray) -> "TriangleMesh":
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles):
            if triangles.min() < 0 or triangles.max() >= len(vertices):
                raise ValueError("TriangleMesh triangle index out of range")
            corners = vertices[triangles]
            keep = triangle_area(corners[:, 0], corners[:, 1], corners[:, 2]) >= DEGENERATE_AREA
        else:
            keep = np.ones(0, dtype=bool)
        dropped = int((~keep).sum())
        if dropped:
            logger.info("Dropped %d degenerate triangles (area < %g m^2)", dropped, DEGENERATE_AREA)
        return cls(vertices, triangles[keep], dropped=dropped)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def corners(self) -> np.ndarray:
        """(M, 3, 3) triangle corner coordinates."""
        return self.vertices[self.triangles]

    @cached_property
    def face_normals(self) -> np.ndarray:
        c = self.corners
        return triangle_normal(c[:, 0], c[:, 1], c[:, 2]).reshape(-1, 3)

    @cached_property
    def face_areas(self) -> np.ndarray:
        c = self.corners
        return np.asarray(triangle_area(c[:, 0], c[:, 1], c[:, 2]), dtype=np.float64).reshape(-1)

    @cached_property
    def face_edge_ratios(self) -> np.ndarray:
        c = self.corners
        return np.asarray(edge_length_ratio(c[:, 0], c[:, 1], c[:, 2]), dtype=np.float64).reshape(-1)

    @cached_property
    def face_ids(self) -> np.ndarray:
        return triangle_ids(self.corners)

    def attributes(self, index: int) -> TriangleAttributes:
        v0, v1, v2 = self.corners[index]
        return TriangleAttributes(
            normal=triangle_normal(v0, v1, v2),
            area=float(triangle_area(v0, v1, v2)),
            edge_ratio=float(edge_length_ratio(v0, v1, v2)),
            id=triangle_id(v0, v1, v2),
        )

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals (zero for unused vertices)."""
        c = self.corners
        weighted = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        acc = np.zeros_like(self.vertices)
        for corner in range(3):
            np.add.at(acc, self.triangles[:, corner], weighted)
        norms = np.linalg.norm(acc, axis=1, keepdims=True)
        return np.divide(acc, norms, out=np.zeros_like(acc), where=norms > 0)

    def transformed(self, transform: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(transform.apply(self.vertices), self.triangles)

    def subset(self, keep: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[np.asarray(keep, dtype=bool)])

    @staticmethod
    def concatenate(meshes: list["TriangleMesh"]) -> "TriangleMesh":
        vertices, triangles, offset = [], [], 0
        for m in meshes:
            vertices.append(m.vertices)
            triangles.append(m.triangles + offset)
            offset += len(m.vertices)
        if not vertices:
            return TriangleMesh.empty()
        return TriangleMesh.from_arrays(np.concatenate(vertices), np.concatenate(triangles))


def load_obj(path: str | Path) -> TriangleMesh:
    """Read the ``v``/``f`` subset of Wavefront OBJ (triangles only, 1-based indices)."""
    path = Path(path)
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *fields = line.split()
            if tag == "v":
                if len(fields) < 3:
                    raise MeshFormatError("vertex record needs 3 coordinates", str(path), lineno)
                try:
                    vertices.append((float(fields[0]), float(fields[1]), float(fields[2])))
                except ValueError as exc:
                    raise MeshFormatError(f"bad vertex coordinate: {exc}", str(path), lineno) from exc
            elif tag == "f":
                if len(fields) != 3:
                    raise MeshFormatError(
                        f"face has {len(fields)} vertices; only triangles are supported",
                        str(path),
                        lineno,
                    )
                try:
                    faces.append(tuple(int(tok.split("/", 1)[0]) - 1 for tok in fields))
                except ValueError as exc:
                    raise MeshFormatError(f"bad face index: {exc}", str(path), lineno) from exc
                if min(faces[-1]) < 0:
                    raise MeshFormatError("face indices are 1-based and positive", str(path), lineno)
            else:
                raise MeshFormatError(f"unsupported record '{tag}'", str(path), lineno)
    triangles = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(triangles) and triangles.max() >= len(vertices):
        raise MeshFormatError("face references a missing vertex", str(path))
    return TriangleMesh.from_arrays(np.asarray(vertices, dtype=np.float64).reshape(-1, 3), triangles)


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
