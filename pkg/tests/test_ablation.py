from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from meshcorrect.config import RunConfig
from meshcorrect.datagen import DatasetManifest
from meshcorrect.metrics import DEFAULT_THRESHOLDS, MetricAccumulator, MetricReport
from scripts.run_ablation import DEFAULT_SET_A, DEFAULT_SET_B, comparison_lines, main, parse_args


def _report(scale: float, gc: tuple[float, int] | None = None) -> MetricReport:
    d_hq = np.linspace(0.2, 1.0, 48).reshape(6, 8)
    acc = MetricAccumulator()
    acc.add(d_hq * 1.3, d_hq * scale, d_hq, np.ones(d_hq.shape, dtype=bool))
    if gc is not None:
        acc.add_gc(*gc)
    return acc.report()


def test_default_overrides_compare_gc_weights() -> None:
    args = parse_args(["--data", "runs/data"])
    assert args.set_a == list(DEFAULT_SET_A) == ["loss.lambda_gc=0.1"]
    assert args.set_b == list(DEFAULT_SET_B) == ["loss.lambda_gc=0.0"]


def test_explicit_overrides_replace_the_default() -> None:
    args = parse_args(["--data", "runs/data", "--set-b", "network.use_attention=false"])
    assert args.set_b == ["network.use_attention=false"]
    assert args.set_a == ["loss.lambda_gc=0.1"]
    a = RunConfig().with_overrides(args.set_a)
    b = RunConfig().with_overrides(args.set_b)
    assert a.loss.lambda_gc == b.loss.lambda_gc
    assert a.network.use_attention and not b.network.use_attention


def test_overrides_are_repeatable() -> None:
    args = parse_args(["--data", "d", "--set-a", "train.seed=1", "--set-a", "network.skip_connections=false"])
    assert args.set_a == ["train.seed=1", "network.skip_connections=false"]


def test_comparison_lines() -> None:
    lines = comparison_lines("gc", _report(1.0, (2.0, 8)), "no-gc", _report(1.1))
    assert lines[0].split() == ["|", "gc", "|", "no-gc"]
    assert len(lines) == 2 + 3 + 2 * len(DEFAULT_THRESHOLDS) + 1
    pixels = next(line for line in lines if line.startswith("pixels"))
    assert pixels.split() == ["pixels", "|", "48", "|", "48"]
    gross = next(line for line in lines if line.startswith("incorrect @1.25"))
    assert "0 (100.0%)" in gross
    assert lines[-1].split() == ["gc", "residual", "|", "0.25", "|", "n/a"]


def test_ablation_run_writes_report(
    tmp_path: Path, tiny_dataset: DatasetManifest, tiny_config: RunConfig, capsys: pytest.CaptureFixture[str]
) -> None:
    tiny_config.save(tmp_path / "tiny.cfg")
    report = tmp_path / "ablation.txt"
    main(
        [
            "--data",
            str(tiny_dataset.root),
            "--config",
            str(tmp_path / "tiny.cfg"),
            "--profile",
            "",
            "--out",
            str(tmp_path / "runs"),
            "--no-progress",
            "--report",
            str(report),
        ]
    )
    assert (tmp_path / "runs" / "gc" / "model.ckpt").exists()
    assert (tmp_path / "runs" / "no-gc" / "model.ckpt").exists()
    assert RunConfig.load(tmp_path / "runs" / "no-gc" / "config.cfg").loss.lambda_gc == 0.0
    text = report.read_text(encoding="utf-8")
    assert text.splitlines()[0].split() == ["|", "gc", "|", "no-gc"]
    assert "gc residual" in capsys.readouterr().out
