"""Training objective: edge-weighted berHu data term, Sobel gradient term,
geometric consistency between views and the L2 weight regulariser.

Every term returns its value together with the analytic gradient with respect to
the prediction image(s) it was evaluated on. Values are sums over pixels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from skimage.feature import canny

from .camera_geometry import DEFAULT_EPS, Intrinsics, RigidTransform, relative_transform
from .errors import ShapeError
from .warp import warp_views

logger = logging.getLogger(__name__)

BERHU_FRACTION = 0.2
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
NEARBY_POLICIES = ("all", "same_height")


@dataclass(frozen=True)
class LossWeights:
    lambda_data: float = 1.0
    lambda_grad: float = 0.1
    lambda_gc: float = 0.1
    lambda_reg: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("lambda_data", "lambda_grad", "lambda_gc", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass(frozen=True, eq=False)
class PixelWeightMap:
    w: np.ndarray
    edges: np.ndarray
    w_min: float = 0.1
    w_max: float = 5.0

    def __post_init__(self) -> None:
        if not 0 <= self.w_min <= self.w_max:
            raise ValueError(f"Need 0 <= w_min <= w_max, got {self.w_min}, {self.w_max}")
        if self.w.shape != self.edges.shape:
            raise ShapeError(f"weight map {self.w.shape} and edge map {self.edges.shape} differ")


def _check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"loss inputs have mismatched shapes: {sorted(shapes)}")


def _weight_array(weights: PixelWeightMap | np.ndarray) -> np.ndarray:
    if isinstance(weights, PixelWeightMap):
        return np.asarray(weights.w, dtype=np.float64)
    return np.asarray(weights, dtype=np.float64)


def berhu(x: np.ndarray | float, c: float) -> tuple[np.ndarray, np.ndarray]:
    """Reverse Huber penalty and its derivative: ``|x|`` up to ``c``, ``(x^2 + c^2) / 2c`` beyond."""
    if c <= 0:
        raise ValueError(f"berHu threshold must be positive, got {c}")
    x = np.asarray(x, dtype=np.float64)
    linear = np.abs(x) <= c
    value = np.where(linear, np.abs(x), (x * x + c * c) / (2.0 * c))
    deriv = np.where(linear, np.sign(x), x / c)
    return value, deriv


def weight_map_from_edges(
    edges: np.ndarray, w_min: float = 0.1, w_max: float = 5.0
) -> PixelWeightMap:
    """Per-pixel loss scaling from the log distance to the nearest edge pixel."""
    edges = np.asarray(edges, dtype=bool)
    if not edges.any():
        return PixelWeightMap(np.full(edges.shape, w_min, dtype=np.float64), edges, w_min, w_max)
    d = np.log1p(ndimage.distance_transform_edt(~edges))
    d_max = float(d.max())
    if d_max == 0.0:
        return PixelWeightMap(np.full(edges.shape, w_max, dtype=np.float64), edges, w_min, w_max)
    w = (w_max - w_min) * (1.0 - d / d_max) + w_min
    w[edges] = w_max
    return PixelWeightMap(w, edges, w_min, w_max)


def label_edges(
    g: np.ndarray,
    valid: np.ndarray,
    sigma: float = 1.0,
    low_percentile: float = 70.0,
    high_percentile: float = 90.0,
) -> np.ndarray:
    """Canny edges of a label image with percentile hysteresis thresholds over ``valid``."""
    g = np.asarray(g, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    _check_same_shape(g, valid)
    if not valid.any() or min(g.shape) < 3:
        return np.zeros(g.shape, dtype=bool)
    smoothed = ndimage.gaussian_filter(np.where(valid, g, 0.0), sigma=sigma, mode="nearest")
    magnitude = np.hypot(ndimage.sobel(smoothed, axis=1), ndimage.sobel(smoothed, axis=0))
    values = magnitude[valid]
    if values.max() == 0.0:
        return np.zeros(g.shape, dtype=bool)
    low, high = np.percentile(values, [low_percentile, high_percentile])
    return canny(g, sigma=sigma, low_threshold=float(low), high_threshold=float(high), mask=valid)


def edge_weight_map(
    g: np.ndarray,
    valid: np.ndarray,
    w_min: float = 0.1,
    w_max: float = 5.0,
    sigma: float = 1.0,
    low_percentile: float = 70.0,
    high_percentile: float = 90.0,
) -> PixelWeightMap:
    edges = label_edges(g, valid, sigma, low_percentile, high_percentile)
    return weight_map_from_edges(edges, w_min, w_max)


def data_loss(
    g_star: np.ndarray,
    g: np.ndarray,
    weights: PixelWeightMap | np.ndarray,
    valid: np.ndarray,
    c: float | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted berHu of the label residual over valid pixels.

    With ``c`` left as None the threshold is ``0.2 * max |residual|`` over the valid
    set and its dependence on the largest residual is part of the gradient.
    """
    w = _weight_array(weights)
    g_star = np.asarray(g_star, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    _check_same_shape(g_star, g, w, valid)
    grad = np.zeros(g.shape, dtype=np.float64)
    if not valid.any():
        return 0.0, grad
    r = np.where(valid, g_star - g, 0.0)
    adaptive = c is None
    if adaptive:
        flat_max = int(np.argmax(np.abs(r)))
        r_max = float(np.abs(r).flat[flat_max])
        c = BERHU_FRACTION * r_max if r_max > 0 else 1.0
    value, deriv = berhu(r, c)
    value = float(np.sum(np.where(valid, w * value, 0.0)))
    grad = np.where(valid, w * deriv, 0.0)
    if adaptive and r_max > 0:
        beyond = valid & (np.abs(r) > c)
        dc = float(np.sum(w[beyond] * (c * c - r[beyond] ** 2) / (2.0 * c * c)))
        grad.flat[flat_max] += BERHU_FRACTION * np.sign(r.flat[flat_max]) * dc
    return value, grad


def sobel_valid(valid: np.ndarray) -> np.ndarray:
    """Pixels whose replicate-padded 3x3 stencil lies entirely on valid pixels."""
    return ndimage.binary_erosion(
        np.asarray(valid, dtype=bool), structure=np.ones((3, 3), dtype=bool), border_value=1
    )


def _correlate_adjoint(grad_out: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = grad_out.shape
    rows, cols = np.mgrid[0:h, 0:w]
    grad = np.zeros((h, w), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            if kernel[i, j] == 0.0:
                continue
            src_r = np.clip(rows + i - 1, 0, h - 1)
            src_c = np.clip(cols + j - 1, 0, w - 1)
            np.add.at(grad, (src_r, src_c), kernel[i, j] * grad_out)
    return grad


def gradient_loss(
    g_star: np.ndarray,
    g: np.ndarray,
    weights: PixelWeightMap | np.ndarray,
    valid: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Half the weighted L1 difference of Sobel gradients over the eroded valid set."""
    w = _weight_array(weights)
    g_star = np.asarray(g_star, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    _check_same_shape(g_star, g, w, valid)
    inner = sobel_valid(valid)
    e = g_star - g
    gx = ndimage.correlate(e, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(e, SOBEL_Y, mode="nearest")
    value = 0.5 * float(np.sum(np.where(inner, w * (np.abs(gx) + np.abs(gy)), 0.0)))
    sx = np.where(inner, 0.5 * w * np.sign(gx), 0.0)
    sy = np.where(inner, 0.5 * w * np.sign(gy), 0.0)
    grad = _correlate_adjoint(sx, SOBEL_X) + _correlate_adjoint(sy, SOBEL_Y)
    return value, grad


@dataclass(eq=False)
class GcTerm:
    """Geometric-consistency value of one target view against its nearby views."""

    value: float
    grad_target: np.ndarray
    grad_nearby: list[np.ndarray]
    unoccluded: int = 0
    residual_sum: float = 0.0


def gc_loss(
    d_star_t: np.ndarray,
    id_t: np.ndarray,
    pose_t: RigidTransform,
    d_star_nearby: Sequence[np.ndarray],
    id_nearby: Sequence[np.ndarray],
    poses_nearby: Sequence[RigidTransform],
    camera: Intrinsics,
    eps: float = DEFAULT_EPS,
    eps_mode: str = "additive",
    propagate_nearby: bool = True,
) -> GcTerm:
    """Sum of warp inconsistencies of view t against every nearby view.

    ``id_*`` are triangle-id images of the reference mesh. Validity of the labels plays
    no part here; only the occlusion masks select pixels.
    """
    if not (len(d_star_nearby) == len(id_nearby) == len(poses_nearby)):
        raise ShapeError("nearby predictions, id images and poses must have equal length")
    d_star_t = np.asarray(d_star_t, dtype=np.float64)
    grad_t = np.zeros(camera.shape, dtype=np.float64)
    grads_n: list[np.ndarray] = []
    value = 0.0
    count = 0
    for d_n, i_n, pose_n in zip(d_star_nearby, id_nearby, poses_nearby):
        result = warp_views(
            d_star_t,
            np.asarray(d_n, dtype=np.float64),
            relative_transform(pose_t, pose_n),
            camera,
            id_t,
            i_n,
            eps,
            eps_mode,
        )
        value += float(result.residual.sum())
        count += int(result.unoccluded.sum())
        g_t, g_n = result.residual_gradients()
        grad_t += g_t
        grads_n.append(g_n if propagate_nearby else np.zeros_like(g_n))
    return GcTerm(value, grad_t, grads_n, unoccluded=count, residual_sum=value)


def nearby_indices(labels: Sequence[str], target: int, policy: str = "all") -> list[int]:
    """Indices of the views in a group that act as nearby views for ``target``."""
    if policy not in NEARBY_POLICIES:
        raise ValueError(f"Unknown nearby-view policy '{policy}' (expected one of {NEARBY_POLICIES})")
    others = [i for i in range(len(labels)) if i != target]
    if policy == "same_height":
        if labels[target] == "top":
            return []
        others = [i for i in others if labels[i] != "top"]
    return others


def group_gc_loss(
    d_star: Sequence[np.ndarray],
    ids: Sequence[np.ndarray],
    poses: Sequence[RigidTransform],
    labels: Sequence[str],
    camera: Intrinsics,
    policy: str = "all",
    eps: float = DEFAULT_EPS,
    eps_mode: str = "additive",
    propagate_nearby: bool = True,
) -> tuple[float, list[np.ndarray], int]:
    """Every view of a group in turn as target; gradients accumulated per view."""
    grads = [np.zeros(camera.shape, dtype=np.float64) for _ in d_star]
    total = 0.0
    count = 0
    for t in range(len(d_star)):
        near = nearby_indices(labels, t, policy)
        if not near:
            continue
        term = gc_loss(
            d_star[t],
            ids[t],
            poses[t],
            [d_star[n] for n in near],
            [ids[n] for n in near],
            [poses[n] for n in near],
            camera,
            eps,
            eps_mode,
            propagate_nearby,
        )
        total += term.value
        count += term.unoccluded
        grads[t] += term.grad_target
        for n, g_n in zip(near, term.grad_nearby):
            grads[n] += g_n
    return total, grads, count


@dataclass(eq=False)
class LossReport:
    total: float
    data: float
    grad: float
    gc: float
    reg: float
    weights: LossWeights = field(default_factory=LossWeights)
    reg_gradient: np.ndarray | None = None

    def terms(self) -> dict[str, float]:
        return {"total": self.total, "data": self.data, "grad": self.grad, "gc": self.gc, "reg": self.reg}

    def non_finite_term(self) -> str | None:
        for name in ("data", "grad", "gc", "reg", "total"):
            if not np.isfinite(getattr(self, name)):
                return name
        return None


def total_loss(
    data: float,
    grad: float,
    gc: float,
    params: np.ndarray | None,
    weights: LossWeights = LossWeights(),
) -> LossReport:
    """Weighted sum of the loss terms, adding ``sum(theta^2)`` over ``params``."""
    if params is None or len(params) == 0:
        reg = 0.0
        reg_gradient = None
    else:
        theta = np.asarray(params, dtype=np.float64)
        reg = float(np.dot(theta, theta))
        reg_gradient = weights.lambda_reg * 2.0 * theta
    total = (
        weights.lambda_data * data
        + weights.lambda_grad * grad
        + weights.lambda_gc * gc
        + weights.lambda_reg * reg
    )
    return LossReport(
        total=float(total),
        data=float(data),
        grad=float(grad),
        gc=float(gc),
        reg=reg,
        weights=weights,
        reg_gradient=reg_gradient,
    )
