"""Inverse-depth evaluation metrics and gross-error counting.

All metrics are evaluated on ``V'``: valid label pixels where both the reference and
the evaluated inverse depth are strictly positive, since the ratio test is undefined
elsewhere.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyEvaluationError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (1.05, 1.15, 1.25, 1.25**2, 1.25**3)
CSV_HEADER = ("threshold", "input_incorrect", "corrected_incorrect", "reduction")


def evaluation_set(d_pred: np.ndarray, d_hq: np.ndarray, valid: np.ndarray) -> np.ndarray:
    d_pred = np.asarray(d_pred)
    d_hq = np.asarray(d_hq)
    valid = np.asarray(valid, dtype=bool)
    if not (d_pred.shape == d_hq.shape == valid.shape):
        raise ShapeError(f"metric inputs differ in shape: {d_pred.shape}, {d_hq.shape}, {valid.shape}")
    return valid & (d_hq > 0) & (d_pred > 0)


def ratio_error(d_pred: np.ndarray, d_hq: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``max(d_hq / d_pred, d_pred / d_hq)`` over the masked pixels (1-D)."""
    p = np.asarray(d_pred, dtype=np.float64)[mask]
    q = np.asarray(d_hq, dtype=np.float64)[mask]
    return np.maximum(q / p, p / q)


def _check_threshold(thr: float) -> None:
    if not thr > 1.0:
        raise ValueError(f"accuracy threshold must exceed 1, got {thr}")


def thresholded_accuracy(d_star: np.ndarray, d_hq: np.ndarray, valid: np.ndarray, thr: float) -> float:
    _check_threshold(thr)
    mask = evaluation_set(d_star, d_hq, valid)
    if not mask.any():
        logger.info("Empty evaluation set; thresholded accuracy is vacuously 1")
        return 1.0
    return float(np.mean(ratio_error(d_star, d_hq, mask) < thr))


def imae_irmse(d_star: np.ndarray, d_hq: np.ndarray, valid: np.ndarray) -> tuple[float, float]:
    mask = evaluation_set(d_star, d_hq, valid)
    if not mask.any():
        raise EmptyEvaluationError("iMAE/iRMSE requested over an empty pixel set")
    err = np.asarray(d_star, dtype=np.float64)[mask] - np.asarray(d_hq, dtype=np.float64)[mask]
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


@dataclass(frozen=True)
class GrossErrorCount:
    threshold: float
    input_incorrect: int
    corrected_incorrect: int

    @property
    def reduction(self) -> float:
        """``1 - corrected / input``; 0 when the input has no incorrect pixels."""
        if self.input_incorrect == 0:
            return 0.0
        return 1.0 - self.corrected_incorrect / self.input_incorrect


def _incorrect(d_pred, d_hq, valid, thresholds: Sequence[float]) -> list[int]:
    mask = evaluation_set(d_pred, d_hq, valid)
    ratios = ratio_error(d_pred, d_hq, mask)
    return [int(np.count_nonzero(ratios >= thr)) for thr in thresholds]


def gross_error_counts(
    d_lq: np.ndarray,
    d_star: np.ndarray,
    d_hq: np.ndarray,
    valid: np.ndarray,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> list[GrossErrorCount]:
    """Pixels failing the ratio test before (``d_lq``) and after (``d_star``) correction.

    Each prediction is counted on its own evaluation set.
    """
    for thr in thresholds:
        _check_threshold(thr)
    before = _incorrect(d_lq, d_hq, valid, thresholds)
    after = _incorrect(d_star, d_hq, valid, thresholds)
    return [GrossErrorCount(t, b, a) for t, b, a in zip(thresholds, before, after)]


@dataclass
class _Tally:
    thresholds: tuple[float, ...]
    n: int = 0
    excluded: int = 0
    abs_sum: float = 0.0
    sq_sum: float = 0.0
    correct: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.correct:
            self.correct = [0] * len(self.thresholds)

    def add(self, d_pred: np.ndarray, d_hq: np.ndarray, valid: np.ndarray) -> None:
        mask = evaluation_set(d_pred, d_hq, valid)
        self.excluded += int(np.count_nonzero(np.asarray(valid, dtype=bool) & ~mask))
        if not mask.any():
            return
        err = np.asarray(d_pred, dtype=np.float64)[mask] - np.asarray(d_hq, dtype=np.float64)[mask]
        ratios = ratio_error(d_pred, d_hq, mask)
        self.n += int(mask.sum())
        self.abs_sum += float(np.sum(np.abs(err)))
        self.sq_sum += float(np.sum(err * err))
        for i, thr in enumerate(self.thresholds):
            self.correct[i] += int(np.count_nonzero(ratios < thr))

    def delta(self) -> dict[float, float]:
        if self.n == 0:
            return {thr: 1.0 for thr in self.thresholds}
        return {thr: c / self.n for thr, c in zip(self.thresholds, self.correct)}

    def errors(self) -> tuple[float, float]:
        if self.n == 0:
            raise EmptyEvaluationError("no pixels were evaluated")
        return self.abs_sum / self.n, math.sqrt(self.sq_sum / self.n)

    def incorrect(self) -> list[int]:
        return [self.n - c for c in self.correct]


@dataclass
class MetricReport:
    delta: dict[float, float]
    imae: float
    irmse: float
    n_valid: int
    gross_error_counts: list[GrossErrorCount]
    input_delta: dict[float, float] = field(default_factory=dict)
    input_imae: float = float("nan")
    input_irmse: float = float("nan")
    excluded_pixels: int = 0
    input_excluded_pixels: int = 0
    gc_residual: float | None = None

    def as_dict(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {"n_valid": self.n_valid}
        for thr, acc in self.delta.items():
            out[f"delta_{thr:.6g}"] = acc
        out["imae"] = self.imae
        out["irmse"] = self.irmse
        for thr, acc in self.input_delta.items():
            out[f"input_delta_{thr:.6g}"] = acc
        out["input_imae"] = self.input_imae
        out["input_irmse"] = self.input_irmse
        out["excluded_pixels"] = self.excluded_pixels
        out["input_excluded_pixels"] = self.input_excluded_pixels
        for g in self.gross_error_counts:
            out[f"gross_input_{g.threshold:.6g}"] = g.input_incorrect
            out[f"gross_corrected_{g.threshold:.6g}"] = g.corrected_incorrect
        if self.gc_residual is not None:
            out["gc_residual"] = self.gc_residual
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.as_dict().items())

    def write_text(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for g in self.gross_error_counts:
                writer.writerow([repr(g.threshold), g.input_incorrect, g.corrected_incorrect, repr(g.reduction)])

    def summary_lines(self) -> list[str]:
        lines = [
            f"Pixels | evaluated: {self.n_valid} excluded: {self.excluded_pixels}",
            f"Error  | iMAE={self.imae:.6f} iRMSE={self.irmse:.6f} (input iMAE={self.input_imae:.6f} iRMSE={self.input_irmse:.6f})",
        ]
        for g in self.gross_error_counts:
            lines.append(
                f"thr {g.threshold:<7.4f}| delta={self.delta.get(g.threshold, float('nan')):.4f} "
                f"incorrect {g.input_incorrect} -> {g.corrected_incorrect} reduction={g.reduction:.1%}"
            )
        if self.gc_residual is not None:
            lines.append(f"GC     | mean residual on unoccluded pixels: {self.gc_residual:.6g}")
        return lines


class MetricAccumulator:
    """Pixel-pooled metrics over a test set: one evaluation set across all images."""

    def __init__(self, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> None:
        for thr in thresholds:
            _check_threshold(thr)
        self.thresholds = tuple(thresholds)
        self._corrected = _Tally(self.thresholds)
        self._input = _Tally(self.thresholds)
        self._gc_sum = 0.0
        self._gc_pixels = 0

    def add(self, d_lq: np.ndarray, d_star: np.ndarray, d_hq: np.ndarray, valid: np.ndarray) -> None:
        self._corrected.add(d_star, d_hq, valid)
        self._input.add(d_lq, d_hq, valid)

    def add_gc(self, residual_sum: float, unoccluded: int) -> None:
        self._gc_sum += residual_sum
        self._gc_pixels += unoccluded

    def report(self) -> MetricReport:
        imae, irmse = self._corrected.errors()
        try:
            input_imae, input_irmse = self._input.errors()
        except EmptyEvaluationError:
            input_imae = input_irmse = float("nan")
        if self._corrected.excluded:
            logger.info("Excluded %d valid pixels with non-positive inverse depth", self._corrected.excluded)
        gross = [
            GrossErrorCount(thr, b, a)
            for thr, b, a in zip(self.thresholds, self._input.incorrect(), self._corrected.incorrect())
        ]
        return MetricReport(
            delta=self._corrected.delta(),
            imae=imae,
            irmse=irmse,
            n_valid=self._corrected.n,
            gross_error_counts=gross,
            input_delta=self._input.delta(),
            input_imae=input_imae,
            input_irmse=input_irmse,
            excluded_pixels=self._corrected.excluded,
            input_excluded_pixels=self._input.excluded,
            gc_residual=self._gc_sum / self._gc_pixels if self._gc_pixels else None,
        )
