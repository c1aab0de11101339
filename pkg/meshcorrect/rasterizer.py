"""Deterministic software rasterizer producing mesh-feature stacks.

Pixel ownership follows a top-left fill rule on screen-space edge functions; the
nearest surface (largest inverse depth) wins, ties broken by the smaller triangle id
and then by triangle order. Triangles are processed in chunks whose per-pixel winners
are merged in a fixed order, so the result does not depend on the chunk size.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .camera_geometry import Intrinsics, RigidTransform
from .errors import ShapeError
from .mesh import BACKGROUND_ID, TriangleMesh

logger = logging.getLogger(__name__)

NEAR_PLANE = 0.01
DEFAULT_CHUNK_PIXELS = 1 << 21

FEATURE_CHANNELS = (
    "inverse_depth",
    "normal_x",
    "normal_y",
    "normal_z",
    "area",
    "edge_ratio",
    "cam_angle",
)


class ViewLabel(enum.Enum):
    FRONT_LEFT = "front_left"
    FRONT_RIGHT = "front_right"
    BACK = "back"
    TOP = "top"


@dataclass(frozen=True)
class Viewpoint:
    pose: RigidTransform
    label: ViewLabel


@dataclass(eq=False)
class MeshFeatureStack:
    inverse_depth: np.ndarray
    normals: np.ndarray
    area: np.ndarray
    edge_ratio: np.ndarray
    cam_angle: np.ndarray
    triangle_id: np.ndarray
    valid: np.ndarray
    camera: Intrinsics
    pose: RigidTransform

    def __post_init__(self) -> None:
        shape = self.camera.shape
        for name in ("inverse_depth", "area", "edge_ratio", "cam_angle", "triangle_id", "valid"):
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.normals.shape != shape + (3,):
            raise ShapeError(f"normals has shape {self.normals.shape}, expected {shape + (3,)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.camera.shape

    def channels(self) -> np.ndarray:
        """Raw feature channels in ``FEATURE_CHANNELS`` order, shape (7, H, W), float32."""
        return np.concatenate(
            [
                self.inverse_depth[None],
                np.moveaxis(self.normals, -1, 0),
                self.area[None],
                self.edge_ratio[None],
                self.cam_angle[None],
            ]
        ).astype(np.float32)

    @classmethod
    def from_channels(
        cls,
        channels: np.ndarray,
        triangle_id: np.ndarray,
        camera: Intrinsics,
        pose: RigidTransform,
    ) -> "MeshFeatureStack":
        channels = np.asarray(channels, dtype=np.float32)
        if channels.shape[0] != len(FEATURE_CHANNELS):
            raise ShapeError(f"Expected {len(FEATURE_CHANNELS)} channels, got {channels.shape[0]}")
        triangle_id = np.asarray(triangle_id, dtype=np.uint64)
        return cls(
            inverse_depth=channels[0],
            normals=np.moveaxis(channels[1:4], 0, -1),
            area=channels[4],
            edge_ratio=channels[5],
            cam_angle=channels[6],
            triangle_id=triangle_id,
            valid=channels[0] > 0,
            camera=camera,
            pose=pose,
        )


def empty_stack(camera: Intrinsics, pose: RigidTransform) -> MeshFeatureStack:
    h, w = camera.shape
    zeros = np.zeros((h, w), dtype=np.float32)
    return MeshFeatureStack(
        inverse_depth=zeros,
        normals=np.zeros((h, w, 3), dtype=np.float32),
        area=zeros.copy(),
        edge_ratio=zeros.copy(),
        cam_angle=zeros.copy(),
        triangle_id=np.zeros((h, w), dtype=np.uint64),
        valid=np.zeros((h, w), dtype=bool),
        camera=camera,
        pose=pose,
    )


def _clip_near(tri: np.ndarray, near: float) -> list[np.ndarray]:
    polygon: list[np.ndarray] = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        a_in, b_in = a[2] >= near, b[2] >= near
        if a_in:
            polygon.append(a)
        if a_in != b_in:
            t = (near - a[2]) / (b[2] - a[2])
            point = a + t * (b - a)
            point[2] = near
            polygon.append(point)
    return [np.stack([polygon[0], polygon[i], polygon[i + 1]]) for i in range(1, len(polygon) - 1)]


def _camera_triangles(mesh: TriangleMesh, pose: RigidTransform, near: float) -> tuple[np.ndarray, np.ndarray]:
    cam = pose.apply(mesh.vertices)[mesh.triangles]
    z = cam[..., 2]
    culled = z.max(axis=1) <= near
    straddle = (z.min(axis=1) < near) & ~culled
    whole = ~culled & ~straddle
    tris = [cam[whole]]
    sources = [np.flatnonzero(whole)]
    clipped, clipped_src = [], []
    for index in np.flatnonzero(straddle):
        for piece in _clip_near(cam[index], near):
            clipped.append(piece)
            clipped_src.append(index)
    if clipped:
        tris.append(np.stack(clipped))
        sources.append(np.asarray(clipped_src, dtype=np.int64))
    tris_all = np.concatenate(tris)
    src_all = np.concatenate(sources)
    order = np.argsort(src_all, kind="stable")
    return tris_all[order], src_all[order]


def _top_left(du: np.ndarray, dv: np.ndarray) -> np.ndarray:
    return (dv < 0) | ((dv == 0) & (du > 0))


class _DepthBuffer:
    def __init__(self, n_pixels: int):
        self.inv = np.zeros(n_pixels, dtype=np.float64)
        self.ids = np.zeros(n_pixels, dtype=np.uint64)
        self.src = np.full(n_pixels, -1, dtype=np.int64)

    def merge(self, pix: np.ndarray, inv: np.ndarray, ids: np.ndarray, src: np.ndarray) -> None:
        if pix.size == 0:
            return
        order = np.lexsort((src, ids, -inv, pix))
        pix, inv, ids, src = pix[order], inv[order], ids[order], src[order]
        _, first = np.unique(pix, return_index=True)
        pix, inv, ids, src = pix[first], inv[first], ids[first], src[first]
        cur_inv, cur_ids, cur_src = self.inv[pix], self.ids[pix], self.src[pix]
        better = (inv > cur_inv) | (
            (inv == cur_inv) & ((ids < cur_ids) | ((ids == cur_ids) & (src < cur_src)))
        )
        pix = pix[better]
        self.inv[pix] = inv[better]
        self.ids[pix] = ids[better]
        self.src[pix] = src[better]


def _scan_chunk(
    buffer: _DepthBuffer,
    u: np.ndarray,
    v: np.ndarray,
    iz: np.ndarray,
    ids: np.ndarray,
    src: np.ndarray,
    x0: np.ndarray,
    y0: np.ndarray,
    widths: np.ndarray,
    counts: np.ndarray,
    image_width: int,
) -> None:
    total = int(counts.sum())
    if total == 0:
        return
    tri = np.repeat(np.arange(len(counts)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    bw = widths[tri]
    px = (x0[tri] + local % bw).astype(np.float64)
    py = (y0[tri] + local // bw).astype(np.float64)

    tu, tv = u[tri], v[tri]
    inside = np.ones(total, dtype=bool)
    edge_values = []
    for a, b in ((1, 2), (2, 0), (0, 1)):
        du = tu[:, b] - tu[:, a]
        dv = tv[:, b] - tv[:, a]
        e = du * (py - tv[:, a]) - dv * (px - tu[:, a])
        inside &= (e > 0) | ((e == 0) & _top_left(du, dv))
        edge_values.append(e)
    area2 = edge_values[2] + edge_values[0] + edge_values[1]
    inv = (
        edge_values[0] * iz[tri, 0] + edge_values[1] * iz[tri, 1] + edge_values[2] * iz[tri, 2]
    ) / area2
    inside &= inv > 0
    pix = py[inside].astype(np.int64) * image_width + px[inside].astype(np.int64)
    buffer.merge(pix, inv[inside], ids[tri[inside]], src[tri[inside]])


def rasterize(
    mesh: TriangleMesh,
    camera: Intrinsics,
    pose: RigidTransform,
    near: float = NEAR_PLANE,
    chunk_pixels: int = DEFAULT_CHUNK_PIXELS,
) -> MeshFeatureStack:
    if len(mesh) == 0:
        return empty_stack(camera, pose)
    h, w = camera.shape
    tris, src = _camera_triangles(mesh, pose, near)
    if len(tris) == 0:
        return empty_stack(camera, pose)

    z = tris[..., 2]
    iz = 1.0 / z
    u = camera.fx * tris[..., 0] * iz + camera.cx
    v = camera.fy * tris[..., 1] * iz + camera.cy

    area2 = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (v[:, 1] - v[:, 0]) * (u[:, 2] - u[:, 0])
    flip = area2 < 0
    for arr in (u, v, iz):
        arr[flip, 1], arr[flip, 2] = arr[flip, 2].copy(), arr[flip, 1].copy()

    x0 = np.clip(np.ceil(u.min(axis=1)), 0, w).astype(np.int64)
    x1 = np.clip(np.floor(u.max(axis=1)), -1, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v.min(axis=1)), 0, h).astype(np.int64)
    y1 = np.clip(np.floor(v.max(axis=1)), -1, h - 1).astype(np.int64)
    widths = np.maximum(x1 - x0 + 1, 0)
    heights = np.maximum(y1 - y0 + 1, 0)
    counts = widths * heights
    counts[area2 == 0] = 0

    ids = mesh.face_ids[src]
    buffer = _DepthBuffer(h * w)
    start = 0
    n = len(counts)
    while start < n:
        stop, acc = start, 0
        while stop < n and (stop == start or acc + counts[stop] <= chunk_pixels):
            acc += int(counts[stop])
            stop += 1
        sl = slice(start, stop)
        _scan_chunk(
            buffer, u[sl], v[sl], iz[sl], ids[sl], src[sl], x0[sl], y0[sl], widths[sl], counts[sl], w
        )
        start = stop

    return _assemble(mesh, camera, pose, buffer)


def _assemble(
    mesh: TriangleMesh, camera: Intrinsics, pose: RigidTransform, buffer: _DepthBuffer
) -> MeshFeatureStack:
    h, w = camera.shape
    inverse_depth = buffer.inv.astype(np.float32).reshape(h, w)
    valid = (buffer.src >= 0).reshape(h, w) & (inverse_depth > 0)
    src = np.where(valid.ravel(), buffer.src, 0)
    flat_valid = valid.ravel()

    normals_cam = mesh.face_normals @ pose.rotation.T
    normals = np.where(flat_valid[:, None], normals_cam[src], 0.0).reshape(h, w, 3)
    area = np.where(flat_valid, mesh.face_areas[src], 0.0).reshape(h, w)
    edge_ratio = np.where(flat_valid, mesh.face_edge_ratios[src], 0.0).reshape(h, w)
    triangle_id = np.where(flat_valid, buffer.ids, np.uint64(BACKGROUND_ID)).reshape(h, w)

    rays = camera.pixel_rays()
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    cosine = np.clip(np.abs(np.einsum("hwc,hwc->hw", normals, rays)), 0.0, 1.0)
    cam_angle = np.where(valid, np.arccos(cosine), 0.0)

    return MeshFeatureStack(
        inverse_depth=np.where(valid, inverse_depth, 0.0).astype(np.float32),
        normals=normals.astype(np.float32),
        area=area.astype(np.float32),
        edge_ratio=edge_ratio.astype(np.float32),
        cam_angle=cam_angle.astype(np.float32),
        triangle_id=triangle_id.astype(np.uint64),
        valid=valid,
        camera=camera,
        pose=pose,
    )


def render_label(hq: MeshFeatureStack, lq: MeshFeatureStack) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-depth correction label ``g = d_hq - d_lq`` and its validity mask."""
    if hq.shape != lq.shape:
        raise ShapeError(f"Stacks differ in size: {hq.shape} vs {lq.shape}")
    if hq.camera != lq.camera or not hq.pose.allclose(lq.pose, atol=0.0):
        raise ShapeError("render_label requires stacks rendered with the same camera and pose")
    g = hq.inverse_depth.astype(np.float32) - lq.inverse_depth.astype(np.float32)
    return g, hq.valid.copy()
