from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from meshcorrect.errors import CheckpointError, NumericalAbortError
from meshcorrect.losses import LossWeights
from meshcorrect.network import CorrectionNet, NetworkSpec
from meshcorrect.training import (
    LOG_HEADER,
    AdamState,
    Objective,
    Trainer,
    TrainConfig,
    TrainingView,
    ViewGroup,
    batch_objective,
    clip_gradient,
    learning_rate,
    sample_batch,
    train_step,
)

MINIATURE = NetworkSpec(topology="miniature")
FAST = TrainConfig(batch_size=2, total_steps=4, checkpoint_every=2)


@pytest.mark.parametrize(
    ("step", "expected"),
    [(0, 1e-4), (60_000, 5.25e-5), (120_000, 5e-6), (500_000, 5e-6)],
)
def test_learning_rate_schedule(step: int, expected: float) -> None:
    assert learning_rate(step, TrainConfig()) == pytest.approx(expected)


def test_learning_rate_is_non_increasing() -> None:
    cfg = TrainConfig(t_max=10)
    rates = [learning_rate(s, cfg) for s in range(15)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_clip_gradient_rescales_to_norm() -> None:
    grad = np.full(4, 80.0)
    clipped, norm = clip_gradient(grad, 80.0)
    assert norm == pytest.approx(160.0)
    np.testing.assert_allclose(clipped, grad / 2)
    small, _ = clip_gradient(np.array([3.0, 4.0]), 80.0)
    np.testing.assert_array_equal(small, [3.0, 4.0])


def test_first_adam_step_moves_by_learning_rate() -> None:
    adam = AdamState.zeros(3)
    delta = adam.update(np.array([0.5, -2.0, 0.0]), 1e-3)
    np.testing.assert_allclose(delta, [1e-3, -1e-3, 0.0], rtol=1e-6)
    assert adam.step == 1


def test_adam_state_round_trip(tmp_path: Path) -> None:
    adam = AdamState.zeros(5)
    adam.update(np.arange(5.0), 1e-3)
    adam.save(tmp_path / "adam.npz")
    loaded = AdamState.load(tmp_path / "adam.npz", 5)
    assert loaded.step == 1
    np.testing.assert_array_equal(loaded.m, adam.m)
    np.testing.assert_array_equal(loaded.v, adam.v)
    with pytest.raises(CheckpointError):
        AdamState.load(tmp_path / "adam.npz", 6)
    with pytest.raises(CheckpointError):
        AdamState.load(tmp_path / "missing.npz", 5)


def test_train_config_validation() -> None:
    with pytest.raises(ValueError):
        TrainConfig(eta_min=1e-3, eta_max=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0.0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        Objective(nearby_policy="closest")


def test_sample_batch_is_deterministic(toy_groups: list[ViewGroup]) -> None:
    a = sample_batch(toy_groups, 5, seed=3, step=7)
    b = sample_batch(toy_groups, 5, seed=3, step=7)
    assert [g.group_id for g in a] == [g.group_id for g in b]
    assert len(a) == 5
    with pytest.raises(ValueError):
        sample_batch([], 2, 0, 0)


def test_batch_objective_gradient(toy_groups: list[ViewGroup]) -> None:
    net = CorrectionNet(MINIATURE, seed=2, dtype=np.float64)
    objective = Objective(weights=LossWeights(lambda_gc=0.5))
    report, grad = batch_objective(net, toy_groups, objective)
    assert report.gc > 0
    assert report.data > 0
    rng = np.random.default_rng(0)
    h = 1e-6
    checked = 0
    for i in rng.choice(net.num_params, size=20, replace=False):
        base = batch_objective(net, toy_groups, objective)[0].total
        net.params[i] += h
        plus = batch_objective(net, toy_groups, objective)[0].total
        net.params[i] -= 2 * h
        minus = batch_objective(net, toy_groups, objective)[0].total
        net.params[i] += h
        if abs((plus - base) / h - (base - minus) / h) > 1e-3:
            continue
        assert grad[i] == pytest.approx((plus - minus) / (2 * h), rel=1e-3, abs=1e-5)
        checked += 1
    assert checked >= 10


def test_gc_term_is_skipped_when_weight_is_zero(toy_groups: list[ViewGroup]) -> None:
    net = CorrectionNet(MINIATURE)
    report, _ = batch_objective(net, toy_groups, Objective(weights=LossWeights(lambda_gc=0.0)))
    assert report.gc == 0.0


def test_train_step_updates_parameters(toy_groups: list[ViewGroup]) -> None:
    net = CorrectionNet(MINIATURE)
    before = net.params.copy()
    adam = AdamState.zeros(net.num_params, FAST)
    _, result = train_step(net, adam, toy_groups, FAST)
    assert adam.step == 1
    assert result.lr == pytest.approx(FAST.eta_max)
    assert result.grad_norm > 0
    assert not np.array_equal(net.params, before)


def test_train_step_aborts_on_non_finite_loss(toy_groups: list[ViewGroup]) -> None:
    view = toy_groups[0].views[0]
    label = view.label.copy()
    label[view.valid] = np.nan
    poisoned = ViewGroup("bad", [TrainingView(view.lq, view.hq_ids, label, view.valid, view.weights, view.viewpoint)])
    net = CorrectionNet(MINIATURE)
    before = net.params.copy()
    with pytest.raises(NumericalAbortError) as info:
        train_step(net, AdamState.zeros(net.num_params), [poisoned], FAST)
    assert info.value.term == "data"
    np.testing.assert_array_equal(net.params, before)


def _log_rows(path: Path) -> list[list[str]]:
    with path.open("r", encoding="utf-8", newline="") as handle:
        return list(csv.reader(handle))


def test_trainer_writes_log_and_checkpoints(tmp_path: Path, toy_groups: list[ViewGroup]) -> None:
    net = CorrectionNet(MINIATURE)
    results = Trainer(net, toy_groups, FAST, Objective(), tmp_path).run(progress=False)
    assert len(results) == 4
    rows = _log_rows(tmp_path / "train_log.csv")
    assert tuple(rows[0]) == LOG_HEADER
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert (tmp_path / "model.ckpt").exists()
    assert (tmp_path / "adam.npz").exists()


def test_zero_steps_only_saves(tmp_path: Path, toy_groups: list[ViewGroup]) -> None:
    net = CorrectionNet(MINIATURE)
    before = net.params.copy()
    cfg = TrainConfig(batch_size=2, total_steps=0)
    assert Trainer(net, toy_groups, cfg, Objective(), tmp_path).run(progress=False) == []
    np.testing.assert_array_equal(net.params, before)
    assert len(_log_rows(tmp_path / "train_log.csv")) == 1


def test_resume_reproduces_uninterrupted_run(tmp_path: Path, toy_groups: list[ViewGroup]) -> None:
    straight = CorrectionNet(MINIATURE)
    Trainer(straight, toy_groups, FAST, Objective(), tmp_path / "a").run(progress=False)

    half = TrainConfig(batch_size=2, total_steps=2, checkpoint_every=2)
    Trainer(CorrectionNet(MINIATURE), toy_groups, half, Objective(), tmp_path / "b").run(progress=False)
    resumed = CorrectionNet(MINIATURE)
    Trainer(resumed, toy_groups, FAST, Objective(), tmp_path / "b").run(resume=True, progress=False)

    np.testing.assert_array_equal(resumed.params, straight.params)
    rows = _log_rows(tmp_path / "b" / "train_log.csv")
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert rows[1:] == _log_rows(tmp_path / "a" / "train_log.csv")[1:]


def test_resume_without_checkpoint_fails(tmp_path: Path, toy_groups: list[ViewGroup]) -> None:
    with pytest.raises(CheckpointError):
        Trainer(CorrectionNet(MINIATURE), toy_groups, FAST, Objective(), tmp_path).run(resume=True, progress=False)


@pytest.mark.slow
def test_training_reduces_loss_on_one_group(tmp_path: Path, toy_groups: list[ViewGroup]) -> None:
    cfg = TrainConfig(eta_max=1e-2, eta_min=1e-3, t_max=200, batch_size=1, total_steps=200, checkpoint_every=0)
    net = CorrectionNet(NetworkSpec(topology="miniature", use_attention=False), seed=1)
    objective = Objective(weights=LossWeights(lambda_gc=0.0))
    results = Trainer(net, toy_groups[:1], cfg, objective, tmp_path).run(progress=False)
    assert results[-1].report.data < 0.5 * results[0].report.data
