from __future__ import annotations

import numpy as np
import pytest

from meshcorrect.errors import ShapeError
from meshcorrect.layers import (
    Conv2D,
    Layer,
    MaxPool,
    ParamSpec,
    ProjectionBlock,
    ReLU,
    ResidualBlock,
    UpProjection,
    bind_flat,
    he_init,
    pixel_shuffle,
    pixel_unshuffle,
    skip_concat,
    skip_split,
)


def _bound(layer: Layer, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    specs = layer.param_specs()
    params = he_init(specs, np.random.default_rng(seed), np.float64)
    # non-zero biases so their gradients are exercised
    params += np.random.default_rng(seed + 1).normal(scale=0.05, size=params.shape)
    grads = np.zeros_like(params)
    bind_flat([layer], specs, params, grads)
    return params, grads


def _central(f, x: np.ndarray, idx, h: float) -> tuple[float, bool]:
    base = f()
    x[idx] += h
    plus = f()
    x[idx] -= 2 * h
    minus = f()
    x[idx] += h
    smooth = abs((plus - base) / h - (base - minus) / h) < 1e-4
    return (plus - minus) / (2 * h), smooth


def _check_layer(layer: Layer, x: np.ndarray, seed: int = 0, samples: int = 25) -> None:
    params, grads = _bound(layer, seed)
    rng = np.random.default_rng(seed + 2)
    y, cache = layer.forward(x)
    upstream = rng.normal(size=y.shape)
    grads[:] = 0
    dx = layer.backward(cache, upstream)
    assert dx.shape == x.shape

    def f() -> float:
        return float(np.sum(upstream * layer.forward(x)[0]))

    checked = 0
    for flat in rng.choice(x.size, size=min(samples, x.size), replace=False):
        idx = np.unravel_index(flat, x.shape)
        fd, smooth = _central(f, x, idx, 1e-6)
        if smooth:
            assert dx[idx] == pytest.approx(fd, rel=1e-5, abs=1e-6)
            checked += 1
    assert checked >= samples // 2
    if not params.size:
        return
    for flat in rng.choice(params.size, size=min(samples, params.size), replace=False):
        fd, smooth = _central(f, params, int(flat), 1e-6)
        if smooth:
            assert grads[flat] == pytest.approx(fd, rel=1e-5, abs=1e-6)


@pytest.mark.parametrize(("k", "stride"), [(1, 1), (3, 1), (3, 2), (5, 2), (1, 2)])
def test_conv2d_gradients(k: int, stride: int) -> None:
    x = np.random.default_rng(k * 10 + stride).normal(size=(2, 3, 8, 8))
    _check_layer(Conv2D("conv", 3, 4, k, stride), x)


def test_conv2d_output_shape_and_identity_kernel() -> None:
    conv = Conv2D("conv", 2, 2, 3, 2)
    params, _ = _bound(conv)
    params[:] = 0
    conv.weight[0, 0, 1, 1] = 1.0
    conv.weight[1, 1, 1, 1] = 1.0
    x = np.random.default_rng(0).normal(size=(1, 2, 9, 7))
    y, _ = conv.forward(x)
    assert y.shape == (1, 2, 5, 4)
    np.testing.assert_allclose(y, x[:, :, ::2, ::2])


def test_conv2d_rejects_wrong_channels() -> None:
    conv = Conv2D("conv", 3, 4)
    _bound(conv)
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 2, 4, 4)))


def test_conv2d_rejects_even_kernel() -> None:
    with pytest.raises(ValueError):
        Conv2D("conv", 1, 1, k=4)


def test_relu_gradient() -> None:
    x = np.random.default_rng(4).normal(size=(2, 2, 5, 5))
    _check_layer(ReLU(), x)


def test_maxpool_shape_and_gradient() -> None:
    x = np.random.default_rng(5).normal(size=(2, 3, 8, 8))
    y, _ = MaxPool().forward(x)
    assert y.shape == (2, 3, 4, 4)
    _check_layer(MaxPool(), x, samples=60)


def test_maxpool_ties_route_to_first_element() -> None:
    pool = MaxPool()
    x = np.ones((1, 1, 4, 4))
    y, cache = pool.forward(x)
    dx = pool.backward(cache, np.ones_like(y))
    assert dx.sum() == pytest.approx(y.size)
    assert dx.max() >= 1.0


@pytest.mark.parametrize(
    "make",
    [
        lambda: ResidualBlock("res", 3),
        lambda: ProjectionBlock("proj", 3, 5),
        lambda: ProjectionBlock("proj", 3, 5, stride=1),
        lambda: UpProjection("up", 3, 2),
    ],
)
def test_composite_block_gradients(make) -> None:
    x = np.random.default_rng(6).normal(size=(1, 3, 6, 6))
    _check_layer(make(), x, seed=3)


def test_pixel_shuffle_layout() -> None:
    x = np.arange(2 * 8 * 2 * 3, dtype=float).reshape(2, 8, 2, 3)
    y = pixel_shuffle(x)
    assert y.shape == (2, 2, 4, 6)
    for c in range(2):
        for i in range(2):
            for j in range(2):
                np.testing.assert_array_equal(y[:, c, i::2, j::2], x[:, c * 4 + i * 2 + j])
    np.testing.assert_array_equal(pixel_unshuffle(y), x)


def test_pixel_shuffle_rejects_bad_channels() -> None:
    with pytest.raises(ShapeError):
        pixel_shuffle(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ShapeError):
        pixel_unshuffle(np.zeros((1, 1, 3, 4)))


def test_skip_concat_and_split() -> None:
    a = np.ones((1, 2, 3, 3))
    b = np.zeros((1, 4, 3, 3))
    joined = skip_concat(a, b)
    assert joined.shape == (1, 6, 3, 3)
    left, right = skip_split(joined, 2)
    np.testing.assert_array_equal(left, a)
    np.testing.assert_array_equal(right, b)
    with pytest.raises(ShapeError):
        skip_concat(a, np.zeros((1, 4, 2, 3)))


def test_he_init_scales_by_fan_in() -> None:
    specs = [ParamSpec("w", (64, 32, 3, 3), 32 * 9), ParamSpec("b", (64,))]
    params = he_init(specs, np.random.default_rng(0), np.float64)
    weights, biases = params[: 64 * 32 * 9], params[64 * 32 * 9 :]
    assert weights.std() == pytest.approx(np.sqrt(2.0 / (32 * 9)), rel=0.05)
    assert not biases.any()
    assert he_init([], np.random.default_rng(0)).size == 0


def test_bind_flat_rejects_wrong_length() -> None:
    conv = Conv2D("conv", 1, 1)
    specs = conv.param_specs()
    with pytest.raises(ShapeError):
        bind_flat([conv], specs, np.zeros(12), np.zeros(12))


def test_bound_parameters_are_views() -> None:
    conv = Conv2D("conv", 1, 2)
    params, _ = _bound(conv)
    params[:] = 7.0
    assert np.all(conv.weight == 7.0)
    assert np.all(conv.bias == 7.0)
