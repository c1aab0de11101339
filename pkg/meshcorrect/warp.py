"""Dense inverse-depth reprojection, bilinear resampling and occlusion masks."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .camera_geometry import DEFAULT_EPS, HomographyLift, Intrinsics, RigidTransform, forward_warp
from .errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class BilinearStencil:
    """Four-neighbour sampling stencil with the derivatives of the sampled values.

    ``index`` holds flat source indices ordered (x0,y0), (x1,y0), (x0,y1), (x1,y1);
    ``weight`` is zero wherever the target pixel is out of bounds.
    """

    index: np.ndarray
    weight: np.ndarray
    d_dx: np.ndarray
    d_dy: np.ndarray
    in_bounds: np.ndarray
    source_shape: tuple[int, int]

    def scatter(self, grad_out: np.ndarray) -> np.ndarray:
        """Adjoint of sampling: gradient of ``sum(grad_out * sample)`` w.r.t. the source image."""
        grad = np.zeros(self.source_shape[0] * self.source_shape[1], dtype=np.float64)
        contrib = self.weight * np.asarray(grad_out, dtype=np.float64)[..., None]
        np.add.at(grad, self.index.ravel(), contrib.ravel())
        return grad.reshape(self.source_shape)


def _neighbours(
    coords: np.ndarray, in_bounds: np.ndarray, shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    h, w = shape
    x = np.where(in_bounds, coords[..., 0], 0.0)
    y = np.where(in_bounds, coords[..., 1], 0.0)
    x0 = np.clip(np.floor(x), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, x1, y0, y1, x - x0, y - y0


def bilinear_stencil(
    image: np.ndarray, coords: np.ndarray, in_bounds: np.ndarray
) -> tuple[np.ndarray, BilinearStencil]:
    image = np.asarray(image, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    in_bounds = np.asarray(in_bounds, dtype=bool)
    if coords.shape[:-1] != in_bounds.shape or coords.shape[-1] != 2:
        raise ShapeError(f"coords {coords.shape} do not match mask {in_bounds.shape}")
    h, w = image.shape
    x0, x1, y0, y1, fx, fy = _neighbours(coords, in_bounds, (h, w))
    i00, i01 = image[y0, x0], image[y0, x1]
    i10, i11 = image[y1, x0], image[y1, x1]
    weight = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1
    ) * in_bounds[..., None]
    index = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    values = weight[..., 0] * i00 + weight[..., 1] * i01 + weight[..., 2] * i10 + weight[..., 3] * i11
    d_dx = np.where(in_bounds, (1 - fy) * (i01 - i00) + fy * (i11 - i10), 0.0)
    d_dy = np.where(in_bounds, (1 - fx) * (i10 - i00) + fx * (i11 - i01), 0.0)
    stencil = BilinearStencil(index, weight, d_dx, d_dy, in_bounds, (h, w))
    return values, stencil


def sample_bilinear(image: np.ndarray, coords: np.ndarray, in_bounds: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at ``coords`` (u, v); 0 where ``in_bounds`` is false."""
    values, _ = bilinear_stencil(image, coords, in_bounds)
    return values


@dataclass(eq=False)
class Reprojection:
    d_nt: np.ndarray
    sample_coords: np.ndarray
    in_bounds: np.ndarray
    dp_dd: np.ndarray
    dd_nt_dd: np.ndarray


def reproject(
    d_t: np.ndarray,
    t_nt: RigidTransform,
    k: Intrinsics,
    eps: float = DEFAULT_EPS,
    eps_mode: str = "additive",
) -> Reprojection:
    """Carry every pixel of view t, with inverse depth ``d_t``, into view n."""
    d_t = np.asarray(d_t, dtype=np.float64)
    if d_t.shape != k.shape:
        raise ShapeError(f"inverse depth {d_t.shape} does not match camera {k.shape}")
    h, w = k.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    warp = forward_warp(u, v, d_t, HomographyLift.between_views(k, t_nt), eps, eps_mode)
    coords = warp.p_n
    finite = np.all(np.isfinite(coords), axis=-1) & np.isfinite(warp.d_nt)
    in_bounds = (
        (d_t > 0)
        & warp.front
        & finite
        & (coords[..., 0] >= 0)
        & (coords[..., 0] <= w - 1)
        & (coords[..., 1] >= 0)
        & (coords[..., 1] <= h - 1)
    )
    return Reprojection(
        d_nt=np.where(np.isfinite(warp.d_nt), warp.d_nt, 0.0),
        sample_coords=np.where(finite[..., None], coords, 0.0),
        in_bounds=in_bounds,
        dp_dd=np.where(in_bounds[..., None], warp.dp_dd, 0.0),
        dd_nt_dd=np.where(in_bounds, warp.dd_nt_dd, 0.0),
    )


def occlusion_mask(
    id_t: np.ndarray, id_n: np.ndarray, coords: np.ndarray, in_bounds: np.ndarray
) -> np.ndarray:
    """Pixels of view t whose triangle id appears among the four nearest samples in view n."""
    id_t = np.asarray(id_t, dtype=np.uint64)
    id_n = np.asarray(id_n, dtype=np.uint64)
    x0, x1, y0, y1, _, _ = _neighbours(np.asarray(coords, dtype=np.float64), in_bounds, id_n.shape)
    match = (
        (id_n[y0, x0] == id_t)
        | (id_n[y0, x1] == id_t)
        | (id_n[y1, x0] == id_t)
        | (id_n[y1, x1] == id_t)
    )
    return in_bounds & (id_t != 0) & match


@dataclass(eq=False)
class WarpResult:
    d_nt: np.ndarray
    d_tilde: np.ndarray
    sample_coords: np.ndarray
    in_bounds: np.ndarray
    unoccluded: np.ndarray
    stencil: BilinearStencil
    dp_dd: np.ndarray
    dd_nt_dd: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return np.where(self.unoccluded, np.abs(self.d_tilde - self.d_nt), 0.0)

    def residual_gradients(self) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``sum(residual)`` w.r.t. the target and nearby inverse depths."""
        s = np.where(self.unoccluded, np.sign(self.d_tilde - self.d_nt), 0.0)
        grad_n = self.stencil.scatter(s)
        grad_t = s * (
            self.stencil.d_dx * self.dp_dd[..., 0]
            + self.stencil.d_dy * self.dp_dd[..., 1]
            - self.dd_nt_dd
        )
        return grad_t, grad_n


def warp_views(
    d_star_t: np.ndarray,
    d_star_n: np.ndarray,
    t_nt: RigidTransform,
    k: Intrinsics,
    id_t: np.ndarray,
    id_n: np.ndarray,
    eps: float = DEFAULT_EPS,
    eps_mode: str = "additive",
) -> WarpResult:
    if np.shape(d_star_n) != k.shape:
        raise ShapeError(f"nearby inverse depth {np.shape(d_star_n)} does not match camera {k.shape}")
    rep = reproject(d_star_t, t_nt, k, eps, eps_mode)
    d_tilde, stencil = bilinear_stencil(d_star_n, rep.sample_coords, rep.in_bounds)
    unoccluded = occlusion_mask(id_t, id_n, rep.sample_coords, rep.in_bounds)
    return WarpResult(
        d_nt=rep.d_nt,
        d_tilde=d_tilde,
        sample_coords=rep.sample_coords,
        in_bounds=rep.in_bounds,
        unoccluded=unoccluded,
        stencil=stencil,
        dp_dd=rep.dp_dd,
        dd_nt_dd=rep.dd_nt_dd,
    )


def inconsistency(
    d_star_t: np.ndarray,
    d_star_n: np.ndarray,
    t_nt: RigidTransform,
    k: Intrinsics,
    id_t: np.ndarray,
    id_n: np.ndarray,
    eps: float = DEFAULT_EPS,
    eps_mode: str = "additive",
) -> tuple[np.ndarray, np.ndarray]:
    """``|d~*_{n,t} - d*_{n,t}|`` on the unoccluded set, 0 elsewhere."""
    result = warp_views(d_star_t, d_star_n, t_nt, k, id_t, id_n, eps, eps_mode)
    if not result.unoccluded.any():
        logger.warning("View pair has no unoccluded overlap")
    return result.residual, result.unoccluded
