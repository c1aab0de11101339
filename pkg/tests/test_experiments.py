"""Desk-profile runs on the full five-scene dataset. Long-running; use ``pytest -m slow -s``."""

from __future__ import annotations

from pathlib import Path

import pytest

from meshcorrect.cli import evaluate_split, train_model
from meshcorrect.config import RunConfig, load_config
from meshcorrect.datagen import DatasetManifest, build_dataset
from meshcorrect.metrics import MetricReport
from scripts.run_ablation import comparison_lines

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk_config() -> RunConfig:
    return load_config()


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory: pytest.TempPathFactory, desk_config: RunConfig) -> DatasetManifest:
    data = desk_config.data
    return build_dataset(
        data.scene_specs(),
        desk_config.render.intrinsics(),
        tmp_path_factory.mktemp("desk"),
        data.corruption_spec(),
        data.spacing,
        data.split_mode,
        data.holdout_scenes,
        desk_config.render.near,
        progress=False,
    )


def _train_and_evaluate(cfg: RunConfig, manifest: DatasetManifest, out_dir: Path) -> MetricReport:
    net, results = train_model(cfg, manifest, out_dir, progress=False)
    assert len(results) == cfg.train.total_steps
    return evaluate_split(net, manifest, "test", cfg, progress=False)


@pytest.fixture(scope="module")
def desk_reports(
    tmp_path_factory: pytest.TempPathFactory, desk_config: RunConfig, desk_dataset: DatasetManifest
) -> tuple[MetricReport, MetricReport]:
    """Test-split reports of the same seeds trained with and without the consistency term."""
    assert desk_config.loss.lambda_gc > 0
    root = tmp_path_factory.mktemp("desk_runs")
    with_gc = _train_and_evaluate(desk_config, desk_dataset, root / "gc")
    without_gc = _train_and_evaluate(desk_config.with_overrides(["loss.lambda_gc=0.0"]), desk_dataset, root / "no-gc")
    print("\n".join(comparison_lines("gc", with_gc, "no-gc", without_gc)))
    return with_gc, without_gc


def test_desk_dataset_holds_out_a_test_split(desk_config: RunConfig, desk_dataset: DatasetManifest) -> None:
    counts = desk_dataset.split_counts()
    assert counts["train"] > counts["test"] > 0
    assert len({rec.scene for rec in desk_dataset.records}) == desk_config.data.scenes


def test_correction_removes_a_quarter_of_gross_errors(desk_reports: tuple[MetricReport, MetricReport]) -> None:
    report, _ = desk_reports
    gross = next(g for g in report.gross_error_counts if g.threshold == 1.25)
    assert gross.input_incorrect > 0
    assert gross.reduction >= 0.25
    assert report.irmse <= report.input_irmse


def test_consistency_term_lowers_gc_residual(desk_reports: tuple[MetricReport, MetricReport]) -> None:
    with_gc, without_gc = desk_reports
    assert with_gc.gc_residual is not None and without_gc.gc_residual is not None
    assert with_gc.gc_residual <= without_gc.gc_residual
