"""Encoder-decoder error-correction network and its checkpoint format."""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from itertools import count
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CacheMismatchError, CheckpointError, ShapeError
from .layers import (
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
    skip_concat,
    skip_split,
)
from .rasterizer import FEATURE_CHANNELS, MeshFeatureStack

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MCNET"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<5sH32sHBBBQ")

TOPOLOGIES = ("desk", "miniature")
# Full-size channel counts; each is divided by the multiplier.
ENCODER_CHANNELS = (64, 64, 256, 512, 1024, 2048)
DECODER_CHANNELS = (1024, 512, 256, 128, 32)
DOWNSAMPLE = 32

_owner_tokens = count(1)


@dataclass(frozen=True)
class NetworkSpec:
    multiplier: int = 8
    use_attention: bool = True
    skip_connections: bool = True
    topology: str = "desk"
    bottleneck_blocks: int = 2
    in_channels: int = len(FEATURE_CHANNELS)

    def __post_init__(self) -> None:
        if self.multiplier < 1 or self.multiplier & (self.multiplier - 1) or self.multiplier > 32:
            raise ValueError(f"multiplier must be a power of two in [1, 32], got {self.multiplier}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"Unknown topology '{self.topology}' (expected one of {TOPOLOGIES})")
        if self.bottleneck_blocks < 1:
            raise ValueError("bottleneck_blocks must be at least 1")

    def width(self, full: int) -> int:
        return max(full // self.multiplier, 1)


def normalize_features(channels: np.ndarray) -> np.ndarray:
    """Network input from raw feature channels ``(..., 7, H, W)``: log area, angle over pi/2."""
    x = np.array(channels, dtype=np.float64, copy=True)
    x[..., 4, :, :] = np.log1p(x[..., 4, :, :])
    x[..., 6, :, :] = x[..., 6, :, :] / (math.pi / 2)
    return x


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def corrected_inverse_depth(d_lq: np.ndarray, g_star: np.ndarray, attention: np.ndarray) -> np.ndarray:
    return d_lq + attention * g_star


@dataclass(eq=False)
class ForwardCache:
    owner: int
    version: int
    levels: list[list[Any]]
    ups: list[Any]
    head: list[Any]
    attention: np.ndarray


def _run(seq: list[Layer], h: np.ndarray, caches: list[Any]) -> np.ndarray:
    for layer in seq:
        h, c = layer.forward(h)
        caches.append(c)
    return h


def _back(seq: list[Layer], caches: list[Any], dh: np.ndarray) -> np.ndarray:
    for layer, c in zip(reversed(seq), reversed(caches)):
        dh = layer.backward(c, dh)
    return dh


class CorrectionNet:
    """Predicts the inverse-depth error ``g*`` and a soft attention mask.

    Parameters live in one flat vector whose layout is fixed by :class:`NetworkSpec`;
    every layer works on views into it.
    """

    def __init__(self, spec: NetworkSpec = NetworkSpec(), seed: int = 0, dtype=np.float32) -> None:
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self._token = next(_owner_tokens)
        self._version = 0
        relu = ReLU()
        if spec.topology == "miniature":
            self.levels: list[list[Layer]] = [[Conv2D("stem", spec.in_channels, 4), relu]]
            self.ups: list[UpProjection] = []
            self.head: list[Layer] = [Conv2D("head.out", 4, 2)]
        else:
            self._build_desk(relu)
        self.param_layout: list[ParamSpec] = [
            s for layer in self._all_layers() for s in layer.param_specs()
        ]
        self.params = he_init(self.param_layout, np.random.default_rng(seed), self.dtype)
        self.grads = np.zeros_like(self.params)
        bind_flat(self._all_layers(), self.param_layout, self.params, self.grads)

    def _build_desk(self, relu: ReLU) -> None:
        s = self.spec
        e = [s.width(c) for c in ENCODER_CHANNELS]
        d = [s.width(c) for c in DECODER_CHANNELS]
        self.levels = [
            [Conv2D("enc0.conv", s.in_channels, e[0]), relu, ResidualBlock("enc0.res", e[0])],
            [Conv2D("enc1.conv", e[0], e[1], k=5, stride=2), relu],
            [MaxPool("enc2.pool")],
            [ResidualBlock("enc3.res1", e[1]), ResidualBlock("enc3.res2", e[1]), ProjectionBlock("enc3.proj", e[1], e[2])],
            [ResidualBlock("enc4.res1", e[2]), ResidualBlock("enc4.res2", e[2]), ProjectionBlock("enc4.proj", e[2], e[3])],
            [ResidualBlock("enc5.res1", e[3]), ResidualBlock("enc5.res2", e[3]), ProjectionBlock("enc5.proj", e[3], e[4])],
        ]
        bottleneck: list[Layer] = [ProjectionBlock("bottleneck.proj", e[4], e[5], stride=1)]
        bottleneck += [ResidualBlock(f"bottleneck.res{i}", e[5]) for i in range(1, s.bottleneck_blocks)]
        self.levels[-1].extend(bottleneck)
        # skips come from the outputs of levels 4, 3, 2, 1, 0
        skip_widths = [e[3], e[2], e[1], e[1], e[0]]
        self.ups = []
        cin = e[5]
        for i, cout in enumerate(d):
            self.ups.append(UpProjection(f"dec{i}.up", cin, cout))
            cin = cout + (skip_widths[i] if s.skip_connections else 0)
        self.head = [ResidualBlock("head.res", cin), Conv2D("head.out", cin, 2)]

    def _all_layers(self) -> list[Layer]:
        return [layer for level in self.levels for layer in level] + list(self.ups) + self.head

    @property
    def num_params(self) -> int:
        return len(self.params)

    def layout_digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(f"{self.spec.topology};{self.spec.skip_connections};{self.spec.use_attention};".encode())
        for p in self.param_layout:
            h.update(f"{p.name}:{'x'.join(map(str, p.shape))};".encode())
        return h.digest()

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values)
        if values.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.shape} parameters, got {values.shape}")
        self.params[:] = values
        self._version += 1

    def apply_update(self, delta: np.ndarray) -> None:
        self.params -= delta.astype(self.dtype, copy=False)
        self._version += 1

    def zero_params(self) -> None:
        self.set_params(np.zeros_like(self.params))

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"expected (N, {self.spec.in_channels}, H, W) features, got {x.shape}"
            )
        if self.spec.topology == "desk" and (x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE):
            raise ShapeError(f"image size {x.shape[2]}x{x.shape[3]} must be divisible by {DOWNSAMPLE}")

    def forward(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
        """Run on raw feature channels ``(N, 7, H, W)``; returns ``(g*, attention, cache)``."""
        features = np.asarray(features)
        self._check_input(features)
        h = normalize_features(features).astype(self.dtype)
        level_caches: list[list[Any]] = []
        skips: list[np.ndarray] = []
        for level in self.levels:
            cs: list[Any] = []
            h = _run(level, h, cs)
            level_caches.append(cs)
            skips.append(h)
        up_caches: list[Any] = []
        for i, up in enumerate(self.ups):
            h, c = up.forward(h)
            up_caches.append(c)
            if self.spec.skip_connections:
                h = skip_concat(h, skips[len(self.levels) - 2 - i])
        head_caches: list[Any] = []
        out = _run(self.head, h, head_caches)
        g_star = out[:, 0]
        if self.spec.use_attention:
            attention = sigmoid(out[:, 1])
        else:
            attention = np.ones_like(g_star)
        cache = ForwardCache(self._token, self._version, level_caches, up_caches, head_caches, attention)
        return g_star, attention, cache

    def forward_stack(self, stack: MeshFeatureStack) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
        g_star, attention, cache = self.forward(stack.channels()[None])
        return g_star[0], attention[0], cache

    def backward(self, cache: ForwardCache, d_g_star: np.ndarray, d_attention: np.ndarray) -> np.ndarray:
        """Parameter gradient for upstream gradients w.r.t. ``g*`` and the attention mask."""
        if cache.owner != self._token or cache.version != self._version:
            raise CacheMismatchError(
                "backward() needs the cache of the latest forward() on this network"
            )
        self.grads[:] = 0
        a = cache.attention
        d_out = np.zeros((a.shape[0], 2) + a.shape[1:], dtype=self.dtype)
        d_out[:, 0] = d_g_star
        if self.spec.use_attention:
            d_out[:, 1] = d_attention * a * (1.0 - a)
        dh = _back(self.head, cache.head, d_out)
        skip_grads: list[np.ndarray | None] = [None] * len(self.levels)
        for i in reversed(range(len(self.ups))):
            up = self.ups[i]
            if self.spec.skip_connections:
                dh, ds = skip_split(dh, up.refine.cout)
                skip_grads[len(self.levels) - 2 - i] = ds
            dh = up.backward(cache.ups[i], dh)
        for i in reversed(range(len(self.levels))):
            if skip_grads[i] is not None:
                dh = dh + skip_grads[i]
            dh = _back(self.levels[i], cache.levels[i], dh)
        return self.grads.copy()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = _HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            self.layout_digest(),
            self.spec.multiplier,
            int(self.spec.use_attention),
            int(self.spec.skip_connections),
            TOPOLOGIES.index(self.spec.topology),
            self.num_params,
        )
        payload = self.params.astype("<f4").tobytes()
        path.write_bytes(header + payload)
        logger.info("Wrote checkpoint %s (%d parameters)", path, self.num_params)

    def load(self, path: str | Path) -> None:
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if len(raw) < _HEADER.size:
            raise CheckpointError(f"{path}: truncated checkpoint header")
        magic, version, digest, multiplier, _, _, _, n = _HEADER.unpack_from(raw)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a network checkpoint")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        if digest != self.layout_digest() or multiplier != self.spec.multiplier or n != self.num_params:
            raise CheckpointError(f"{path}: layer layout does not match this network")
        payload = raw[_HEADER.size :]
        if len(payload) != 4 * n:
            raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, expected {4 * n}")
        self.set_params(np.frombuffer(payload, dtype="<f4"))

    @classmethod
    def from_checkpoint(cls, path: str | Path, dtype=np.float32) -> "CorrectionNet":
        """Rebuild the network described by a checkpoint header and load its weights."""
        try:
            raw = Path(path).read_bytes()[: _HEADER.size]
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if len(raw) < _HEADER.size:
            raise CheckpointError(f"{path}: truncated checkpoint header")
        magic, _, _, multiplier, attention, skips, topology, _ = _HEADER.unpack(raw)
        if magic != CHECKPOINT_MAGIC or topology >= len(TOPOLOGIES):
            raise CheckpointError(f"{path}: not a network checkpoint")
        spec = NetworkSpec(
            multiplier=multiplier,
            use_attention=bool(attention),
            skip_connections=bool(skips),
            topology=TOPOLOGIES[topology],
        )
        net = cls(spec, dtype=dtype)
        net.load(path)
        return net
