from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import pytest

from oracles import brute_metrics

from meshcorrect.errors import EmptyEvaluationError, ShapeError
from meshcorrect.metrics import (
    CSV_HEADER,
    DEFAULT_THRESHOLDS,
    GrossErrorCount,
    MetricAccumulator,
    evaluation_set,
    gross_error_counts,
    imae_irmse,
    thresholded_accuracy,
)


def _images(rng: np.random.Generator, shape=(12, 16)):
    d_hq = rng.uniform(0.05, 1.0, size=shape)
    d_hq[rng.random(shape) < 0.1] = 0.0
    d_pred = d_hq * rng.uniform(0.7, 1.4, size=shape)
    d_pred[rng.random(shape) < 0.05] = -0.01
    valid = rng.random(shape) > 0.15
    return d_pred, d_hq, valid


@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_pixel_loops(seed: int) -> None:
    d_pred, d_hq, valid = _images(np.random.default_rng(seed), (8, 8))
    acc, imae, irmse, n = brute_metrics(d_pred, d_hq, valid, DEFAULT_THRESHOLDS)
    assert n > 0
    for thr, expected in zip(DEFAULT_THRESHOLDS, acc):
        assert thresholded_accuracy(d_pred, d_hq, valid, thr) == pytest.approx(expected, abs=1e-12)
    got_mae, got_rmse = imae_irmse(d_pred, d_hq, valid)
    assert got_mae == pytest.approx(imae, rel=1e-12)
    assert got_rmse == pytest.approx(irmse, rel=1e-12)
    assert int(evaluation_set(d_pred, d_hq, valid).sum()) == n


def test_accuracy_is_monotone_in_threshold(rng: np.random.Generator) -> None:
    d_pred, d_hq, valid = _images(rng)
    values = [thresholded_accuracy(d_pred, d_hq, valid, thr) for thr in DEFAULT_THRESHOLDS]
    assert values == sorted(values)


def test_exact_prediction() -> None:
    d = np.full((3, 3), 0.4)
    valid = np.ones((3, 3), dtype=bool)
    assert thresholded_accuracy(d, d, valid, 1.05) == 1.0
    assert imae_irmse(d, d, valid) == (0.0, 0.0)


def test_empty_evaluation_set() -> None:
    d = np.zeros((2, 2))
    valid = np.ones((2, 2), dtype=bool)
    assert thresholded_accuracy(d, d, valid, 1.25) == 1.0
    with pytest.raises(EmptyEvaluationError):
        imae_irmse(d, d, valid)


def test_threshold_must_exceed_one() -> None:
    d = np.ones((2, 2))
    with pytest.raises(ValueError):
        thresholded_accuracy(d, d, np.ones((2, 2), dtype=bool), 1.0)


def test_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        evaluation_set(np.ones((2, 2)), np.ones((2, 3)), np.ones((2, 2), dtype=bool))


def test_gross_counts_complement_accuracy(rng: np.random.Generator) -> None:
    d_pred, d_hq, valid = _images(rng)
    d_lq = d_hq * 1.3
    counts = gross_error_counts(d_lq, d_pred, d_hq, valid)
    n = int(evaluation_set(d_pred, d_hq, valid).sum())
    for count in counts:
        delta = thresholded_accuracy(d_pred, d_hq, valid, count.threshold)
        assert count.corrected_incorrect == round(n * (1 - delta))
    assert [c.input_incorrect for c in counts[:3]] == [int(evaluation_set(d_lq, d_hq, valid).sum())] * 3
    assert counts[3].input_incorrect == 0


@pytest.mark.parametrize(
    ("before", "after", "reduction"),
    [(10, 4, 0.6), (5, 5, 0.0), (4, 6, -0.5), (0, 0, 0.0), (0, 3, 0.0)],
)
def test_reduction(before: int, after: int, reduction: float) -> None:
    assert GrossErrorCount(1.25, before, after).reduction == pytest.approx(reduction)


def test_accumulator_pools_pixels(rng: np.random.Generator) -> None:
    images = [_images(rng) for _ in range(3)]
    acc = MetricAccumulator()
    for d_pred, d_hq, valid in images:
        acc.add(d_hq * 1.1, d_pred, d_hq, valid)
    report = acc.report()
    pooled = [np.concatenate([im[i].ravel() for im in images]) for i in range(3)]
    expected_acc, expected_mae, expected_rmse, n = brute_metrics(*(p[None, :] for p in pooled), DEFAULT_THRESHOLDS)
    assert report.n_valid == n
    assert report.imae == pytest.approx(expected_mae)
    assert report.irmse == pytest.approx(expected_rmse)
    assert list(report.delta.values()) == pytest.approx(expected_acc)
    assert report.input_imae == pytest.approx(0.1 * float(np.mean(pooled[1][pooled[2] & (pooled[1] > 0)])))
    assert report.excluded_pixels > 0
    assert report.gc_residual is None


def test_accumulator_gc_mean() -> None:
    acc = MetricAccumulator()
    d = np.full((2, 2), 0.5)
    acc.add(d, d, d, np.ones((2, 2), dtype=bool))
    acc.add_gc(3.0, 4)
    acc.add_gc(1.0, 4)
    report = acc.report()
    assert report.gc_residual == pytest.approx(0.5)
    assert report.as_dict()["gc_residual"] == pytest.approx(0.5)
    assert any(line.startswith("GC") for line in report.summary_lines())


def test_accumulator_with_no_pixels_fails() -> None:
    with pytest.raises(EmptyEvaluationError):
        MetricAccumulator().report()


def test_report_files(tmp_path: Path, rng: np.random.Generator) -> None:
    acc = MetricAccumulator()
    d_pred, d_hq, valid = _images(rng)
    acc.add(d_hq * 1.3, d_pred, d_hq, valid)
    report = acc.report()
    report.write_csv(tmp_path / "out" / "gross.csv")
    with (tmp_path / "out" / "gross.csv").open(encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 1 + len(DEFAULT_THRESHOLDS)
    assert float(rows[3][0]) == pytest.approx(1.25)
    report.write_text(tmp_path / "metrics.txt")
    text = (tmp_path / "metrics.txt").read_text(encoding="utf-8")
    assert f"n_valid = {report.n_valid}" in text
    assert "imae = " in text
    assert len(report.summary_lines()) == 2 + len(DEFAULT_THRESHOLDS)
    assert not math.isnan(report.input_imae)
