"""Layer primitives with explicit forward and backward passes.

Tensors are laid out ``(N, C, H, W)``. ``forward`` returns ``(y, cache)`` and
``backward(cache, dy)`` returns ``dx`` while accumulating parameter gradients into
the arrays handed to :meth:`Layer.bind`. Convolutions pad by edge replication.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    fan_in: int = 0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _fold_edge_padding(grad_padded: np.ndarray, pad: int, height: int, width: int) -> np.ndarray:
    """Adjoint of ``np.pad(..., mode='edge')`` on the last two axes."""
    if pad == 0:
        return grad_padded
    rows = grad_padded[:, :, pad : pad + height, :].copy()
    rows[:, :, 0, :] += grad_padded[:, :, :pad, :].sum(axis=2)
    rows[:, :, -1, :] += grad_padded[:, :, pad + height :, :].sum(axis=2)
    out = rows[:, :, :, pad : pad + width].copy()
    out[:, :, :, 0] += rows[:, :, :, :pad].sum(axis=3)
    out[:, :, :, -1] += rows[:, :, :, pad + width :].sum(axis=3)
    return out


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


class Layer:
    """Base class; parameterless layers only override forward/backward."""

    def __init__(self, name: str = "") -> None:
        self.name = name

    def param_specs(self) -> list[ParamSpec]:
        return []

    def bind(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        return None

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, cache: Any, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Composite(Layer):
    def children(self) -> list[Layer]:
        raise NotImplementedError

    def param_specs(self) -> list[ParamSpec]:
        return [spec for child in self.children() for spec in child.param_specs()]

    def bind(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for child in self.children():
            child.bind(params, grads)


class Conv2D(Layer):
    def __init__(self, name: str, cin: int, cout: int, k: int = 3, stride: int = 1) -> None:
        super().__init__(name)
        if k % 2 != 1:
            raise ValueError(f"Conv2D kernel size must be odd, got {k}")
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.weight: np.ndarray | None = None
        self.bias: np.ndarray | None = None
        self.dweight: np.ndarray | None = None
        self.dbias: np.ndarray | None = None

    def param_specs(self) -> list[ParamSpec]:
        return [
            ParamSpec(f"{self.name}.weight", (self.cout, self.cin, self.k, self.k), self.cin * self.k * self.k),
            ParamSpec(f"{self.name}.bias", (self.cout,)),
        ]

    def bind(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.weight = params[f"{self.name}.weight"]
        self.bias = params[f"{self.name}.bias"]
        self.dweight = grads[f"{self.name}.weight"]
        self.dbias = grads[f"{self.name}.bias"]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError(f"{self.name}: expected (N, {self.cin}, H, W) input, got {x.shape}")
        win = _windows(x, self.k, self.stride)
        y = np.tensordot(win, self.weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        y = y + self.bias[None, :, None, None]
        return np.ascontiguousarray(y), (x.shape, win)

    def backward(self, cache: Any, dy: np.ndarray) -> np.ndarray:
        x_shape, win = cache
        n, c, h, w = x_shape
        k, s, pad = self.k, self.stride, self.k // 2
        self.dweight += np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3])).astype(self.dweight.dtype)
        self.dbias += dy.sum(axis=(0, 2, 3)).astype(self.dbias.dtype)
        dwin = np.tensordot(dy, self.weight, axes=([1], [0]))
        ho, wo = dy.shape[2], dy.shape[3]
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return _fold_edge_padding(dxp, pad, h, w)


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, cache: Any, dy: np.ndarray) -> np.ndarray:
        return dy * cache


class MaxPool(Layer):
    """3x3 max pooling with stride 2; ties go to the first element in row-major order."""

    def __init__(self, name: str = "pool", k: int = 3, stride: int = 2) -> None:
        super().__init__(name)
        self.k, self.stride = k, stride

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        n, c, h, w = x.shape
        win = _windows(x, self.k, self.stride)
        ho, wo = win.shape[2], win.shape[3]
        flat = win.reshape(n, c, ho, wo, self.k * self.k)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, cache: Any, dy: np.ndarray) -> np.ndarray:
        (n, c, h, w), arg = cache
        k, s, pad = self.k, self.stride, self.k // 2
        hp, wp = h + 2 * pad, w + 2 * pad
        ho, wo = arg.shape[2], arg.shape[3]
        rows = np.arange(ho)[:, None] * s + arg // k
        cols = np.arange(wo)[None, :] * s + arg % k
        plane = np.arange(n * c).reshape(n, c, 1, 1) * (hp * wp)
        flat_index = rows * wp + cols + plane
        dxp = np.zeros(n * c * hp * wp, dtype=dy.dtype)
        np.add.at(dxp, flat_index.ravel(), dy.ravel())
        return _fold_edge_padding(dxp.reshape(n, c, hp, wp), pad, h, w)


def pixel_shuffle(x: np.ndarray, r: int = 2) -> np.ndarray:
    """Channel-to-space: ``out[c, r*h + i, r*w + j] = x[c*r*r + i*r + j, h, w]``."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle needs channels divisible by {r * r}, got {c}")
    return (
        x.reshape(n, c // (r * r), r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c // (r * r), h * r, w * r)
    )


def pixel_unshuffle(y: np.ndarray, r: int = 2) -> np.ndarray:
    n, c, hr, wr = y.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle needs spatial size divisible by {r}, got {hr}x{wr}")
    h, w = hr // r, wr // r
    return y.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


class ResidualBlock(Composite):
    """``relu(x + conv(relu(conv(x))))``."""

    def __init__(self, name: str, channels: int) -> None:
        super().__init__(name)
        self.conv1 = Conv2D(f"{name}.conv1", channels, channels)
        self.conv2 = Conv2D(f"{name}.conv2", channels, channels)
        self.relu = ReLU()

    def children(self) -> list[Layer]:
        return [self.conv1, self.conv2]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        a, c1 = self.conv1.forward(x)
        b, r1 = self.relu.forward(a)
        z, c2 = self.conv2.forward(b)
        y, r2 = self.relu.forward(x + z)
        return y, (c1, r1, c2, r2)

    def backward(self, cache: Any, dy: np.ndarray) -> np.ndarray:
        c1, r1, c2, r2 = cache
        ds = self.relu.backward(r2, dy)
        db = self.conv2.backward(c2, ds)
        da = self.relu.backward(r1, db)
        return ds + self.conv1.backward(c1, da)


class ProjectionBlock(Composite):
    """Residual block whose shortcut is a strided 1x1 convolution changing the channel count."""

    def __init__(self, name: str, cin: int, cout: int, stride: int = 2) -> None:
        super().__init__(name)
        self.conv1 = Conv2D(f"{name}.conv1", cin, cout, 3, stride)
        self.conv2 = Conv2D(f"{name}.conv2", cout, cout)
        self.shortcut = Conv2D(f"{name}.shortcut", cin, cout, 1, stride)
        self.relu = ReLU()

    def children(self) -> list[Layer]:
        return [self.conv1, self.conv2, self.shortcut]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        a, c1 = self.conv1.forward(x)
        b, r1 = self.relu.forward(a)
        z, c2 = self.conv2.forward(b)
        sc, cs = self.shortcut.forward(x)
        y, r2 = self.relu.forward(z + sc)
        return y, (c1, r1, c2, cs, r2)

    def backward(self, cache: Any, dy: np.ndarray) -> np.ndarray:
        c1, r1, c2, cs, r2 = cache
        ds = self.relu.backward(r2, dy)
        da = self.relu.backward(r1, self.conv2.backward(c2, ds))
        return self.conv1.backward(c1, da) + self.shortcut.backward(cs, ds)


class UpProjection(Composite):
    """Convolution to ``4 * cout`` channels, pixel shuffle to twice the resolution,
    then a residual convolution."""

    def __init__(self, name: str, cin: int, cout: int) -> None:
        super().__init__(name)
        self.expand = Conv2D(f"{name}.expand", cin, 4 * cout)
        self.refine = Conv2D(f"{name}.refine", cout, cout)
        self.relu = ReLU()

    def children(self) -> list[Layer]:
        return [self.expand, self.refine]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        e, ce = self.expand.forward(x)
        s = pixel_shuffle(e)
        b, r1 = self.relu.forward(s)
        z, cr = self.refine.forward(b)
        y, r2 = self.relu.forward(s + z)
        return y, (ce, r1, cr, r2)

    def backward(self, cache: Any, dy: np.ndarray) -> np.ndarray:
        ce, r1, cr, r2 = cache
        ds = self.relu.backward(r2, dy)
        ds = ds + self.relu.backward(r1, self.refine.backward(cr, ds))
        return self.expand.backward(ce, pixel_unshuffle(ds))


def skip_concat(decoder: np.ndarray, encoder: np.ndarray) -> np.ndarray:
    if decoder.shape[0] != encoder.shape[0] or decoder.shape[2:] != encoder.shape[2:]:
        raise ShapeError(f"cannot concatenate {decoder.shape} with skip {encoder.shape}")
    return np.concatenate([decoder, encoder], axis=1)


def skip_split(dy: np.ndarray, decoder_channels: int) -> tuple[np.ndarray, np.ndarray]:
    return dy[:, :decoder_channels], dy[:, decoder_channels:]


def he_init(specs: list[ParamSpec], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Flat parameter vector: fan-in scaled normal weights, zero biases."""
    chunks = []
    for spec in specs:
        if spec.fan_in:
            chunks.append(rng.standard_normal(spec.size) * math.sqrt(2.0 / spec.fan_in))
        else:
            chunks.append(np.zeros(spec.size))
    if not chunks:
        return np.zeros(0, dtype=dtype)
    return np.concatenate(chunks).astype(dtype)


def bind_flat(
    layers: list[Layer], specs: list[ParamSpec], params: np.ndarray, grads: np.ndarray
) -> None:
    """Hand every layer reshaped views into the flat parameter and gradient vectors."""
    p_views: dict[str, np.ndarray] = {}
    g_views: dict[str, np.ndarray] = {}
    offset = 0
    for spec in specs:
        p_views[spec.name] = params[offset : offset + spec.size].reshape(spec.shape)
        g_views[spec.name] = grads[offset : offset + spec.size].reshape(spec.shape)
        offset += spec.size
    if offset != len(params):
        raise ShapeError(f"parameter vector has {len(params)} entries, layout needs {offset}")
    for layer in layers:
        layer.bind(p_views, g_views)
