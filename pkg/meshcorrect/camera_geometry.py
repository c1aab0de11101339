"""Pinhole cameras, rigid transforms and homogeneous inverse-depth projection.

Conventions shared with the rasterizer and the sampler:

- pixel coordinates are ``(u, v)`` with ``u`` along the image width and ``v`` along
  the height, pixel centres at integer coordinates;
- camera frames look along ``+z`` with ``v`` increasing downwards;
- a pose is the world-to-camera transform.

Geometry is evaluated in float64 throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_EPS = 1e-6
EPS_MODES = ("additive", "near_zero")

_ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def pixel_rays(self) -> np.ndarray:
        """Unnormalised rays ``K^-1 (u, v, 1)`` for every pixel centre, shape (H, W, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        rays = np.empty((self.height, self.width, 3), dtype=np.float64)
        rays[..., 0] = (u - self.cx) / self.fx
        rays[..., 1] = (v - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise ValueError("RigidTransform requires finite entries")
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > _ORTHONORMAL_TOL:
            raise ValueError("RigidTransform rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError("RigidTransform rotation must have determinant +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "RigidTransform":
        return cls(np.eye(3), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def to_list(self) -> list[float]:
        """Row-major 3x4 ``[R | t]`` as 12 floats."""
        return [float(x) for x in self.matrix[:3, :].ravel()]

    @classmethod
    def from_list(cls, values: list[float]) -> "RigidTransform":
        if len(values) != 12:
            raise ValueError(f"Expected 12 pose values, got {len(values)}")
        block = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(block[:, :3], block[:, 3])


@dataclass(frozen=True, eq=False)
class HomographyLift:
    """4x4 map ``F_h`` between homogeneous inverse-depth pixels of two views."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        matrix = np.array(self.matrix, dtype=np.float64).reshape(4, 4)
        if abs(np.linalg.det(matrix)) <= 1e-12:
            raise ValueError("HomographyLift must be invertible")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def between_views(cls, k: Intrinsics, t_nt: RigidTransform) -> "HomographyLift":
        k_h = lift_intrinsics(k)
        return cls(k_h @ t_nt.matrix @ _inverse_lift(k))

    def inverse(self) -> "HomographyLift":
        return HomographyLift(np.linalg.inv(self.matrix))


@dataclass(frozen=True)
class HomogeneousPixelPoint:
    u: float
    v: float
    d: float
    w: float = 1.0

    def __post_init__(self) -> None:
        if self.w != 1.0:
            raise ValueError("HomogeneousPixelPoint is constructed with w = 1")
        if not all(math.isfinite(x) for x in (self.u, self.v, self.d)):
            raise ValueError("HomogeneousPixelPoint requires finite coordinates")

    def as_vector(self) -> np.ndarray:
        return np.array([self.u, self.v, self.w, self.d], dtype=np.float64)


def lift_intrinsics(k: Intrinsics) -> np.ndarray:
    k_h = np.eye(4)
    k_h[:3, :3] = k.matrix
    return k_h


def _inverse_lift(k: Intrinsics) -> np.ndarray:
    inv = np.eye(4)
    inv[0, 0] = 1.0 / k.fx
    inv[1, 1] = 1.0 / k.fy
    inv[0, 2] = -k.cx / k.fx
    inv[1, 2] = -k.cy / k.fy
    return inv


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    rt = a.rotation.T
    return RigidTransform(rt, -rt @ a.translation)


def relative_transform(pose_t: RigidTransform, pose_n: RigidTransform) -> RigidTransform:
    """``T_{n,t}``: camera frame of view t to camera frame of view n (poses are world-to-camera)."""
    return compose(pose_n, invert(pose_t))


def rotation_about_z(degrees: float) -> RigidTransform:
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    return RigidTransform(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.zeros(3))


def look_pose(position: np.ndarray, forward: np.ndarray, down: np.ndarray) -> RigidTransform:
    """World-to-camera pose of a camera at ``position`` looking along ``forward``.

    ``down`` is the world direction that should appear downwards in the image; it is
    orthogonalised against ``forward``.
    """
    position = np.asarray(position, dtype=np.float64)
    z_axis = np.asarray(forward, dtype=np.float64)
    z_axis = z_axis / np.linalg.norm(z_axis)
    y_axis = np.asarray(down, dtype=np.float64)
    y_axis = y_axis - z_axis * float(y_axis @ z_axis)
    norm = np.linalg.norm(y_axis)
    if norm < 1e-12:
        raise ValueError("look_pose: 'down' must not be parallel to 'forward'")
    y_axis = y_axis / norm
    x_axis = np.cross(y_axis, z_axis)
    rotation = np.stack([x_axis, y_axis, z_axis])
    return RigidTransform(rotation, -rotation @ position)


def camera_center(pose: RigidTransform) -> np.ndarray:
    return -pose.rotation.T @ pose.translation


def guard_denominator(z: np.ndarray | float, eps: float, mode: str = "additive") -> np.ndarray:
    """Add ``eps`` with the sign of ``z`` (sign(0) = +1)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    z = np.asarray(z, dtype=np.float64)
    signed = np.where(z >= 0.0, eps, -eps)
    if mode == "additive":
        return z + signed
    if mode == "near_zero":
        return np.where(np.abs(z) < eps, z + signed, z)
    raise ValueError(f"Unknown eps mode '{mode}' (expected one of {EPS_MODES})")


def forward_warp_point(
    x_t: HomogeneousPixelPoint,
    f: HomographyLift,
    eps: float = DEFAULT_EPS,
    mode: str = "additive",
) -> tuple[np.ndarray, float, bool]:
    x_n = f.matrix @ x_t.as_vector()
    z = float(guard_denominator(x_n[2], eps, mode))
    p_n = np.array([x_n[0] / z, x_n[1] / z])
    return p_n, float(x_n[3] / z), bool(x_n[2] > 0.0)


@dataclass
class DenseWarp:
    """Per-pixel output of :func:`forward_warp` plus derivatives with respect to ``d``."""

    p_n: np.ndarray
    d_nt: np.ndarray
    front: np.ndarray
    dp_dd: np.ndarray
    dd_nt_dd: np.ndarray


def forward_warp(
    u: np.ndarray,
    v: np.ndarray,
    d: np.ndarray,
    f: HomographyLift,
    eps: float = DEFAULT_EPS,
    mode: str = "additive",
) -> DenseWarp:
    """Vectorised :func:`forward_warp_point` over arrays of pixels."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    m = f.matrix
    # x_n = a + b * d with b = F[:, 3]
    x = [m[i, 0] * u + m[i, 1] * v + m[i, 2] + m[i, 3] * d for i in range(4)]
    z = guard_denominator(x[2], eps, mode)
    inv_z = 1.0 / z
    p_n = np.stack([x[0] * inv_z, x[1] * inv_z], axis=-1)
    d_nt = x[3] * inv_z
    inv_z2 = inv_z * inv_z
    dp_dd = np.stack(
        [(m[0, 3] * z - x[0] * m[2, 3]) * inv_z2, (m[1, 3] * z - x[1] * m[2, 3]) * inv_z2],
        axis=-1,
    )
    dd_nt_dd = (m[3, 3] * z - x[3] * m[2, 3]) * inv_z2
    return DenseWarp(p_n=p_n, d_nt=d_nt, front=x[2] > 0.0, dp_dd=dp_dd, dd_nt_dd=dd_nt_dd)
