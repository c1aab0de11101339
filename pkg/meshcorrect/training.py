"""Adam optimisation of the correction network over batches of view groups."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from tqdm import tqdm

from .camera_geometry import DEFAULT_EPS, EPS_MODES
from .errors import CheckpointError, NumericalAbortError
from .losses import (
    NEARBY_POLICIES,
    LossReport,
    LossWeights,
    PixelWeightMap,
    data_loss,
    gradient_loss,
    group_gc_loss,
    total_loss,
)
from .network import CorrectionNet
from .rasterizer import MeshFeatureStack

logger = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "total", "data", "grad", "gc", "reg", "grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    eta_max: float = 1e-4
    eta_min: float = 5e-6
    t_max: int = 120_000
    clip_norm: float = 80.0
    batch_size: int = 16
    total_steps: int = 500_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.eta_min <= self.eta_max:
            raise ValueError(f"Need 0 < eta_min <= eta_max, got {self.eta_min}, {self.eta_max}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.t_max < 1 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("t_max and batch_size must be >= 1, total_steps >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")


@dataclass(frozen=True)
class Objective:
    """Loss settings shared by training and evaluation."""

    weights: LossWeights = field(default_factory=LossWeights)
    nearby_policy: str = "all"
    gc_both_views: bool = True
    eps: float = DEFAULT_EPS
    eps_mode: str = "additive"

    def __post_init__(self) -> None:
        if self.nearby_policy not in NEARBY_POLICIES:
            raise ValueError(f"Unknown nearby-view policy '{self.nearby_policy}'")
        if self.eps_mode not in EPS_MODES:
            raise ValueError(f"Unknown eps mode '{self.eps_mode}'")


@dataclass(eq=False)
class TrainingView:
    lq: MeshFeatureStack
    hq_ids: np.ndarray
    label: np.ndarray
    valid: np.ndarray
    weights: PixelWeightMap
    viewpoint: str


@dataclass(eq=False)
class ViewGroup:
    """The views rendered at one trajectory location."""

    group_id: str
    views: list[TrainingView]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.m.shape != self.v.shape:
            raise ValueError("Adam moment arrays must have the same shape")
        if self.step < 0:
            raise ValueError("Adam step counter must be non-negative")

    @classmethod
    def zeros(cls, size: int, cfg: TrainConfig = TrainConfig()) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def update(self, grad: np.ndarray, lr: float) -> np.ndarray:
        """Advance the moments by one step and return the parameter decrement."""
        grad = np.asarray(grad, dtype=np.float64)
        self.step += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as handle:
            np.savez(
                handle,
                m=self.m,
                v=self.v,
                step=np.int64(self.step),
                hyper=np.array([self.beta1, self.beta2, self.eps]),
            )

    @classmethod
    def load(cls, path: str | Path, size: int) -> "AdamState":
        try:
            with np.load(Path(path)) as data:
                state = cls(
                    data["m"].copy(),
                    data["v"].copy(),
                    int(data["step"]),
                    *(float(x) for x in data["hyper"]),
                )
        except (OSError, KeyError, ValueError) as exc:
            raise CheckpointError(f"cannot read optimizer state {path}: {exc}") from exc
        if len(state.m) != size:
            raise CheckpointError(f"{path}: optimizer state has {len(state.m)} entries, network {size}")
        return state


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear decay from eta_max to eta_min over t_max steps, constant afterwards."""
    frac = min(step, cfg.t_max) / cfg.t_max
    return cfg.eta_max - (cfg.eta_max - cfg.eta_min) * frac


def clip_gradient(grad: np.ndarray, clip_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if norm > clip_norm:
        return grad * (clip_norm / norm), norm
    return grad, norm


def sample_batch(groups: Sequence[ViewGroup], batch_size: int, seed: int, step: int) -> list[ViewGroup]:
    """Deterministic in ``(seed, step)`` so a resumed run draws the same batches."""
    if not groups:
        raise ValueError("cannot sample a batch from an empty training set")
    rng = np.random.default_rng([seed, step])
    replace = batch_size > len(groups)
    idx = rng.choice(len(groups), size=batch_size, replace=replace)
    return [groups[int(i)] for i in idx]


@dataclass
class StepResult:
    report: LossReport
    lr: float
    grad_norm: float


def _check_finite(report: LossReport, step: int) -> None:
    term = report.non_finite_term()
    if term is not None:
        raise NumericalAbortError(term, getattr(report, term), step)


def batch_objective(
    net: CorrectionNet, batch: Sequence[ViewGroup], objective: Objective
) -> tuple[LossReport, np.ndarray]:
    """Loss of a batch of view groups (terms scaled by 1/|batch|) and its parameter gradient."""
    views = [v for group in batch for v in group.views]
    x = np.stack([v.lq.channels() for v in views])
    g_star, attention, cache = net.forward(x)
    g_star = g_star.astype(np.float64)
    attention = attention.astype(np.float64)
    correction = attention * g_star
    w = objective.weights
    d_corr = np.zeros_like(correction)
    data_sum = grad_sum = gc_sum = 0.0
    for k, view in enumerate(views):
        ld, gd = data_loss(correction[k], view.label, view.weights, view.valid)
        lg, gg = gradient_loss(correction[k], view.label, view.weights, view.valid)
        data_sum += ld
        grad_sum += lg
        d_corr[k] = w.lambda_data * gd + w.lambda_grad * gg
    if w.lambda_gc > 0:
        k = 0
        for group in batch:
            n = len(group.views)
            d_star = [group.views[i].lq.inverse_depth + correction[k + i] for i in range(n)]
            value, grads, _ = group_gc_loss(
                d_star,
                [v.hq_ids for v in group.views],
                [v.lq.pose for v in group.views],
                [v.viewpoint for v in group.views],
                group.views[0].lq.camera,
                objective.nearby_policy,
                objective.eps,
                objective.eps_mode,
                objective.gc_both_views,
            )
            gc_sum += value
            for i in range(n):
                d_corr[k + i] += w.lambda_gc * grads[i]
            k += n
    scale = 1.0 / len(batch)
    d_corr *= scale
    param_grad = net.backward(cache, d_corr * attention, d_corr * g_star).astype(np.float64)
    report = total_loss(data_sum * scale, grad_sum * scale, gc_sum * scale, net.params, w)
    if report.reg_gradient is not None:
        param_grad += report.reg_gradient
    return report, param_grad


def train_step(
    net: CorrectionNet,
    adam: AdamState,
    batch: Sequence[ViewGroup],
    cfg: TrainConfig,
    objective: Objective = Objective(),
) -> tuple[np.ndarray, StepResult]:
    step = adam.step
    report, grad = batch_objective(net, batch, objective)
    _check_finite(report, step)
    grad, norm = clip_gradient(grad, cfg.clip_norm)
    if not math.isfinite(norm):
        raise NumericalAbortError("gradient", norm, step)
    lr = learning_rate(step, cfg)
    net.apply_update(adam.update(grad, lr))
    return net.params, StepResult(report, lr, norm)


def _log_row(step: int, result: StepResult) -> list[str]:
    r = result.report
    return [str(step)] + [repr(float(x)) for x in (result.lr, r.total, r.data, r.grad, r.gc, r.reg, result.grad_norm)]


def _restore_log(log_path: Path, next_step: int) -> list[list[str]]:
    if not log_path.exists():
        return []
    with log_path.open("r", encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle))
    return [row for row in rows[1:] if row and int(row[0]) < next_step]


class Trainer:
    """Runs train_step for the configured number of steps with CSV logging and checkpoints.

    ``out_dir`` receives ``model.ckpt``, ``adam.npz`` and ``train_log.csv``. With
    ``resume`` the three are read back and training continues from the stored step.
    """

    def __init__(
        self,
        net: CorrectionNet,
        groups: Sequence[ViewGroup],
        cfg: TrainConfig,
        objective: Objective,
        out_dir: str | Path,
    ) -> None:
        self.net = net
        self.groups = list(groups)
        self.cfg = cfg
        self.objective = objective
        self.out_dir = Path(out_dir)
        self.adam = AdamState.zeros(net.num_params, cfg)

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / "model.ckpt"

    @property
    def adam_path(self) -> Path:
        return self.out_dir / "adam.npz"

    @property
    def log_path(self) -> Path:
        return self.out_dir / "train_log.csv"

    def resume(self) -> int:
        self.net.load(self.checkpoint_path)
        self.adam = AdamState.load(self.adam_path, self.net.num_params)
        logger.info("Resumed training from %s at step %d", self.out_dir, self.adam.step)
        return self.adam.step

    def _save(self) -> None:
        self.net.save(self.checkpoint_path)
        self.adam.save(self.adam_path)

    def run(self, resume: bool = False, progress: bool = True) -> list[StepResult]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        start = self.resume() if resume else 0
        rows = _restore_log(self.log_path, start) if resume else []
        results: list[StepResult] = []
        with self.log_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(LOG_HEADER)
            writer.writerows(rows)
            steps = range(start, self.cfg.total_steps)
            for step in tqdm(steps, desc="train", disable=not progress, initial=start, total=self.cfg.total_steps):
                batch = sample_batch(self.groups, self.cfg.batch_size, self.cfg.seed, step)
                _, result = train_step(self.net, self.adam, batch, self.cfg, self.objective)
                writer.writerow(_log_row(step, result))
                handle.flush()
                results.append(result)
                done = step + 1
                if self.cfg.checkpoint_every and done % self.cfg.checkpoint_every == 0:
                    self._save()
        self._save()
        return results
