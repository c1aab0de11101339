#!/usr/bin/env python3
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence


def _ensure_repo_on_path() -> None:
    repo_root = Path(__file__).resolve().parents[1]
    if str(repo_root) not in sys.path:
        sys.path.insert(0, str(repo_root))


_ensure_repo_on_path()

from meshcorrect.cli import LOG_FORMAT, evaluate_split, train_model
from meshcorrect.config import load_config, resolve_out_dir
from meshcorrect.datagen import DatasetManifest
from meshcorrect.metrics import MetricReport

DEFAULT_SET_A = ("loss.lambda_gc=0.1",)
DEFAULT_SET_B = ("loss.lambda_gc=0.0",)


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Train two configurations on identical seeds and compare them on a held-out split"
    )
    parser.add_argument("--data", type=Path, required=True, help="Dataset directory or manifest")
    parser.add_argument("--config", type=Path, help="Base run configuration")
    parser.add_argument("--profile", default="desk", help="Bundled profile applied before --config")
    parser.add_argument("--name-a", default="gc", help="Display name for configuration A")
    parser.add_argument("--name-b", default="no-gc", help="Display name for configuration B")
    parser.add_argument(
        "--set-a",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="Override for configuration A (repeatable; default: loss.lambda_gc=0.1)",
    )
    parser.add_argument(
        "--set-b",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="Override for configuration B (repeatable; default: loss.lambda_gc=0.0)",
    )
    parser.add_argument("--split", default="test", choices=("train", "val", "test"))
    parser.add_argument("--out", type=Path, help="Output directory (default: $MESHCORRECT_OUT_DIR or ./runs)")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars")
    parser.add_argument("--report", type=Path, help="Optional file to write the summary output")
    args = parser.parse_args(argv)
    # Explicit overrides replace the defaults for that side.
    args.set_a = args.set_a or list(DEFAULT_SET_A)
    args.set_b = args.set_b or list(DEFAULT_SET_B)
    return args


def _row(label: str, a: object, b: object) -> str:
    return f"{label:<22}| {a!s:>14} | {b!s:>14}"


def comparison_lines(name_a: str, report_a: MetricReport, name_b: str, report_b: MetricReport) -> list[str]:
    lines = [_row("", name_a, name_b), "-" * 56]
    lines.append(_row("pixels", report_a.n_valid, report_b.n_valid))
    lines.append(_row("iMAE", f"{report_a.imae:.6f}", f"{report_b.imae:.6f}"))
    lines.append(_row("iRMSE", f"{report_a.irmse:.6f}", f"{report_b.irmse:.6f}"))
    for ga, gb in zip(report_a.gross_error_counts, report_b.gross_error_counts):
        thr = ga.threshold
        lines.append(_row(f"delta<{thr:.4g}", f"{report_a.delta[thr]:.4f}", f"{report_b.delta[thr]:.4f}"))
        lines.append(
            _row(
                f"incorrect @{thr:.4g}",
                f"{ga.corrected_incorrect} ({ga.reduction:.1%})",
                f"{gb.corrected_incorrect} ({gb.reduction:.1%})",
            )
        )
    gc_a = "n/a" if report_a.gc_residual is None else f"{report_a.gc_residual:.6g}"
    gc_b = "n/a" if report_b.gc_residual is None else f"{report_b.gc_residual:.6g}"
    lines.append(_row("gc residual", gc_a, gc_b))
    return lines


def main(argv: Sequence[str] | None = None) -> None:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    out_dir = resolve_out_dir(args.out)
    manifest = DatasetManifest.load(args.data)
    reports = []
    for name, overrides in ((args.name_a, args.set_a), (args.name_b, args.set_b)):
        cfg = load_config(args.config, args.profile or None, overrides)
        net, _ = train_model(cfg, manifest, out_dir / name, progress=not args.no_progress)
        reports.append(evaluate_split(net, manifest, args.split, cfg, progress=not args.no_progress))
    lines = comparison_lines(args.name_a, reports[0], args.name_b, reports[1])
    for line in lines:
        print(line, flush=True)
    if args.report:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text("\n".join(lines), encoding="utf-8")


if __name__ == "__main__":
    main()
