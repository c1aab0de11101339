"""``meshcorrect`` command line: generate, train, eval, warp-debug and render."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from tqdm import tqdm

from .camera_geometry import look_pose, relative_transform
from .config import DEFAULT_PROFILE, RunConfig, load_config, resolve_out_dir
from .datagen import DatasetManifest, build_dataset, load_sample
from .errors import ConfigError, DataError, MeshFormatError, NumericalAbortError, ShapeError
from .imageio import write_image, write_pgm, write_stack
from .losses import edge_weight_map, group_gc_loss
from .mesh import load_obj
from .metrics import MetricAccumulator, MetricReport
from .network import CorrectionNet, corrected_inverse_depth
from .rasterizer import rasterize
from .training import StepResult, Trainer, TrainingView, ViewGroup
from .warp import warp_views

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration-error code."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _vector(text: str) -> np.ndarray:
    try:
        values = [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected three numbers, got {text!r}")
    return np.array(values)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="Run configuration file (INI sections)")
    common.add_argument(
        "--profile",
        default=DEFAULT_PROFILE,
        help="Bundled profile applied before --config; pass an empty string for the full-scale defaults",
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration value (repeatable)",
    )
    common.add_argument("--seed", type=int, help="Seed for data generation, initialisation and batching")
    common.add_argument("--out", type=Path, help="Output directory (default: $MESHCORRECT_OUT_DIR or ./runs)")
    common.add_argument("--log-level", default="INFO", help="Logging level")
    common.add_argument("--no-progress", action="store_true", help="Disable progress bars")
    common.add_argument("--report", type=Path, help="Optional file to write the summary output")

    parser = _Parser(prog="meshcorrect", description="Learned correction of triangle-mesh inverse depth")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="Render a synthetic paired-mesh dataset")

    p = sub.add_parser("train", parents=[common], help="Train the correction network")
    p.add_argument("--data", type=Path, required=True, help="Dataset directory or manifest")
    p.add_argument("--resume", action="store_true", help="Continue from the checkpoint in --out")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on a dataset split")
    p.add_argument("--data", type=Path, required=True, help="Dataset directory or manifest")
    p.add_argument("--checkpoint", type=Path, required=True, help="Network checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("warp-debug", parents=[common], help="Warp one sample into another and write residual images")
    p.add_argument("--data", type=Path, required=True, help="Dataset directory or manifest")
    p.add_argument("--target", required=True, help="Target sample as group/viewpoint")
    p.add_argument("--nearby", required=True, help="Nearby sample as group/viewpoint")
    p.add_argument("--depth", default="hq", choices=("hq", "lq", "corrected"), help="Inverse depth to warp")
    p.add_argument("--checkpoint", type=Path, help="Network checkpoint for --depth corrected")

    p = sub.add_parser("render", parents=[common], help="Rasterize one mesh to a feature stack")
    p.add_argument("--mesh", type=Path, required=True, help="OBJ mesh")
    p.add_argument("--position", type=_vector, default=np.zeros(3), help="Camera centre x,y,z (world)")
    p.add_argument("--forward", type=_vector, default=np.array([1.0, 0.0, 0.0]), help="Viewing direction")
    p.add_argument("--down", type=_vector, default=np.array([0.0, 0.0, -1.0]), help="World direction shown downwards")
    p.add_argument("--name", default="render", help="Output file stem")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"data.seed={args.seed}", f"train.seed={args.seed}", f"network.init_seed={args.seed}"]
    return load_config(args.config, args.profile or None, overrides)


def build_network(cfg: RunConfig, checkpoint: Path | None = None) -> CorrectionNet:
    net = CorrectionNet(cfg.network.spec(), seed=cfg.network.init_seed, dtype=cfg.dtype)
    if checkpoint is not None:
        net.load(checkpoint)
    return net


def load_view_groups(
    manifest: DatasetManifest, split: str, cfg: RunConfig, progress: bool = False
) -> list[ViewGroup]:
    """Training views of one split, with label edge weights computed from the loss settings."""
    loss = cfg.loss
    groups = []
    for group_id, records in tqdm(manifest.groups(split).items(), desc=f"load {split}", disable=not progress):
        views = []
        for rec in records:
            sample = load_sample(manifest, rec)
            weights = edge_weight_map(
                sample.label,
                sample.valid,
                loss.w_min,
                loss.w_max,
                loss.canny_sigma,
                loss.canny_low_percentile,
                loss.canny_high_percentile,
            )
            views.append(
                TrainingView(sample.lq, sample.hq.triangle_id, sample.label, sample.valid, weights, rec.viewpoint)
            )
        groups.append(ViewGroup(group_id, views))
    return groups


def train_model(
    cfg: RunConfig, manifest: DatasetManifest, out_dir: Path, resume: bool = False, progress: bool = True
) -> tuple[CorrectionNet, list[StepResult]]:
    groups = load_view_groups(manifest, "train", cfg, progress)
    if not groups:
        raise DataError(f"dataset {manifest.root} has no training view groups")
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.cfg")
    net = build_network(cfg)
    trainer = Trainer(net, groups, cfg.train.train_config(), cfg.objective(), out_dir)
    return net, trainer.run(resume=resume, progress=progress)


def evaluate_split(
    net: CorrectionNet, manifest: DatasetManifest, split: str, cfg: RunConfig, progress: bool = True
) -> MetricReport:
    """Metrics of the corrected inverse depth over a split, plus its mean gc residual."""
    objective = cfg.objective()
    groups = manifest.groups(split)
    if not groups:
        raise DataError(f"dataset {manifest.root} has no '{split}' samples")
    acc = MetricAccumulator()
    for records in tqdm(groups.values(), desc=f"eval {split}", disable=not progress):
        samples = [load_sample(manifest, rec) for rec in records]
        g_star, attention, _ = net.forward(np.stack([s.lq.channels() for s in samples]))
        d_star = []
        for k, s in enumerate(samples):
            d = corrected_inverse_depth(s.lq.inverse_depth, g_star[k], attention[k])
            acc.add(s.lq.inverse_depth, d, s.hq.inverse_depth, s.valid)
            d_star.append(d)
        total, _, count = group_gc_loss(
            d_star,
            [s.hq.triangle_id for s in samples],
            [s.record.pose for s in samples],
            [s.record.viewpoint for s in samples],
            manifest.camera,
            objective.nearby_policy,
            objective.eps,
            objective.eps_mode,
        )
        acc.add_gc(total, count)
    return acc.report()


def _train_summary(results: Sequence[StepResult], out_dir: Path) -> list[str]:
    lines = [f"Run     | {out_dir}", f"Steps   | {len(results)} this invocation"]
    if results:
        first, last = results[0].report, results[-1].report
        lines.append(f"Loss    | total {first.total:.6g} -> {last.total:.6g}")
        lines.append(
            f"Terms   | data={last.data:.6g} grad={last.grad:.6g} gc={last.gc:.6g} reg={last.reg:.6g}"
        )
        lines.append(f"LR      | {results[-1].lr:.3g} grad norm {results[-1].grad_norm:.4g}")
    lines.append(f"Weights | {out_dir / 'model.ckpt'}")
    return lines


def cmd_generate(args: argparse.Namespace, cfg: RunConfig) -> list[str]:
    out_dir = resolve_out_dir(args.out)
    data = cfg.data
    manifest = build_dataset(
        data.scene_specs(),
        cfg.render.intrinsics(),
        out_dir,
        data.corruption_spec(),
        data.spacing,
        data.split_mode,
        data.holdout_scenes,
        cfg.render.near,
        progress=not args.no_progress,
    )
    cfg.save(out_dir / "config.cfg")
    return manifest.summary_lines()


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> list[str]:
    out_dir = resolve_out_dir(args.out)
    manifest = DatasetManifest.load(args.data)
    _, results = train_model(cfg, manifest, out_dir, resume=args.resume, progress=not args.no_progress)
    return _train_summary(results, out_dir)


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> list[str]:
    out_dir = resolve_out_dir(args.out)
    manifest = DatasetManifest.load(args.data)
    net = build_network(cfg, args.checkpoint)
    report = evaluate_split(net, manifest, args.split, cfg, progress=not args.no_progress)
    report.write_text(out_dir / "metrics.txt")
    report.write_csv(out_dir / "gross_errors.csv")
    return [f"Eval    | {args.checkpoint} on {args.split} split"] + report.summary_lines()


def cmd_warp_debug(args: argparse.Namespace, cfg: RunConfig) -> list[str]:
    out_dir = resolve_out_dir(args.out)
    manifest = DatasetManifest.load(args.data)
    rec_t, rec_n = manifest.find(args.target), manifest.find(args.nearby)
    if rec_t.scene != rec_n.scene:
        raise DataError(f"samples {args.target} and {args.nearby} come from different scenes")
    if args.depth == "corrected" and args.checkpoint is None:
        raise ConfigError("--depth corrected needs --checkpoint", key="checkpoint")
    samples = [load_sample(manifest, rec_t), load_sample(manifest, rec_n)]
    if args.depth == "hq":
        depths = [s.hq.inverse_depth for s in samples]
    elif args.depth == "lq":
        depths = [s.lq.inverse_depth for s in samples]
    else:
        net = build_network(cfg, args.checkpoint)
        g_star, attention, _ = net.forward(np.stack([s.lq.channels() for s in samples]))
        depths = [corrected_inverse_depth(s.lq.inverse_depth, g_star[k], attention[k]) for k, s in enumerate(samples)]
    result = warp_views(
        depths[0],
        depths[1],
        relative_transform(rec_t.pose, rec_n.pose),
        manifest.camera,
        samples[0].hq.triangle_id,
        samples[1].hq.triangle_id,
        cfg.geometry.eps,
        cfg.geometry.eps_mode,
    )
    residual = result.residual
    mask = result.unoccluded
    images = {
        "d_nt": result.d_nt,
        "d_tilde": result.d_tilde,
        "residual": residual,
        "unoccluded": mask,
        "in_bounds": result.in_bounds,
    }
    for name, image in images.items():
        write_image(out_dir / f"{name}.img", image)
    write_pgm(out_dir / "residual.pgm", residual, mask)
    write_pgm(out_dir / "unoccluded.pgm", mask.astype(np.uint8) * 255)
    n = int(mask.sum())
    if n == 0:
        logger.warning("No unoccluded overlap between %s and %s", args.target, args.nearby)
        stats = "mean=n/a max=n/a"
    else:
        stats = f"mean={float(residual[mask].mean()):.6g} max={float(residual[mask].max()):.6g}"
    return [
        f"Pair     | {args.target} -> {args.nearby} ({args.depth} inverse depth)",
        f"Pixels   | in bounds: {int(result.in_bounds.sum())} unoccluded: {n}",
        f"Residual | {stats}",
        f"Images   | {out_dir}",
    ]


def cmd_render(args: argparse.Namespace, cfg: RunConfig) -> list[str]:
    out_dir = resolve_out_dir(args.out)
    mesh = load_obj(args.mesh)
    try:
        pose = look_pose(args.position, args.forward, args.down)
    except ValueError as exc:
        raise ConfigError(f"camera orientation: {exc}", key="forward") from exc
    stack = rasterize(mesh, cfg.render.intrinsics(), pose, cfg.render.near)
    write_stack(out_dir / f"{args.name}.stack", stack)
    write_pgm(out_dir / f"{args.name}_inverse_depth.pgm", stack.inverse_depth, stack.valid)
    return [
        f"Mesh    | {args.mesh} ({len(mesh)} triangles, {mesh.dropped} dropped)",
        f"Pixels  | covered: {int(stack.valid.sum())} of {stack.valid.size}",
        f"Stack   | {out_dir / (args.name + '.stack')}",
    ]


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "warp-debug": cmd_warp_debug,
    "render": cmd_render,
}


def emit(lines: Sequence[str], report: Path | None) -> None:
    for line in lines:
        print(line, flush=True)
    if report:
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text("\n".join(lines) + "\n", encoding="utf-8")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"meshcorrect: unknown log level '{args.log_level}'", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=level, format=LOG_FORMAT)
    try:
        cfg = config_from_args(args)
        lines = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalAbortError as exc:
        logger.error("Numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (DataError, MeshFormatError, ShapeError, OSError) as exc:
        logger.error("Data error: %s", exc)
        return EXIT_DATA
    emit(lines, args.report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
