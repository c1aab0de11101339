from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import pytest

from meshcorrect.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from meshcorrect.config import RunConfig
from meshcorrect.datagen import MANIFEST_NAME, DatasetManifest
from meshcorrect.metrics import CSV_HEADER
from meshcorrect.training import LOG_HEADER

TARGET = "scene_000/loc_0000/front_left"
NEARBY = "scene_000/loc_0000/front_right"


@dataclass(frozen=True)
class Workspace:
    config: Path
    data: Path
    run: Path

    def common(self, out: Path) -> list[str]:
        return ["--config", str(self.config), "--profile", "", "--out", str(out), "--no-progress"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory: pytest.TempPathFactory, tiny_config: RunConfig) -> Workspace:
    """A generated dataset and a short training run shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    ws = Workspace(root / "tiny.cfg", root / "data", root / "run")
    tiny_config.save(ws.config)
    assert main(["generate", *ws.common(ws.data)]) == EXIT_OK
    assert main(["train", *ws.common(ws.run), "--data", str(ws.data)]) == EXIT_OK
    return ws


def _rows(path: Path) -> list[list[str]]:
    with path.open("r", encoding="utf-8", newline="") as handle:
        return list(csv.reader(handle))


def test_generate_writes_manifest(workspace: Workspace) -> None:
    manifest = DatasetManifest.load(workspace.data / MANIFEST_NAME)
    assert manifest.camera.shape == (48, 96)
    assert all(count > 0 for count in manifest.split_counts().values())
    assert RunConfig.load(workspace.data / "config.cfg").data.scenes == 1


def test_train_writes_run_directory(workspace: Workspace) -> None:
    assert (workspace.run / "model.ckpt").exists()
    assert (workspace.run / "adam.npz").exists()
    assert RunConfig.load(workspace.run / "config.cfg").network.topology == "miniature"
    rows = _rows(workspace.run / "train_log.csv")
    assert tuple(rows[0]) == LOG_HEADER
    assert len(rows) == 1 + 3


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_regenerated_run_reproduces_loss_log(workspace: Workspace, tmp_path: Path) -> None:
    again = Workspace(workspace.config, tmp_path / "data", tmp_path / "run")
    assert main(["generate", *again.common(again.data)]) == EXIT_OK
    assert (again.data / MANIFEST_NAME).read_bytes() == (workspace.data / MANIFEST_NAME).read_bytes()
    assert main(["train", *again.common(again.run), "--data", str(again.data)]) == EXIT_OK
    assert _digest(again.run / "train_log.csv") == _digest(workspace.run / "train_log.csv")
    assert _digest(again.run / "model.ckpt") == _digest(workspace.run / "model.ckpt")


def test_train_resume_extends_log(workspace: Workspace, tmp_path: Path) -> None:
    out = tmp_path / "resumed"
    base = ["train", *workspace.common(out), "--data", str(workspace.data)]
    assert main([*base, "--set", "train.total_steps=2"]) == EXIT_OK
    assert main([*base, "--resume"]) == EXIT_OK
    rows = _rows(out / "train_log.csv")
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2]


def test_eval_writes_metrics(workspace: Workspace, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    out = tmp_path / "eval"
    args = [
        "eval",
        *workspace.common(out),
        "--data",
        str(workspace.data),
        "--checkpoint",
        str(workspace.run / "model.ckpt"),
        "--report",
        str(out / "summary.txt"),
    ]
    assert main(args) == EXIT_OK
    text = (out / "metrics.txt").read_text(encoding="utf-8")
    assert "imae = " in text
    assert "gc_residual = " in text
    assert tuple(_rows(out / "gross_errors.csv")[0]) == CSV_HEADER
    stdout = capsys.readouterr().out
    assert "on test split" in stdout
    assert (out / "summary.txt").read_text(encoding="utf-8").splitlines()[0].startswith("Eval")


@pytest.mark.parametrize("depth", ["hq", "lq"])
def test_warp_debug_images(workspace: Workspace, tmp_path: Path, depth: str) -> None:
    out = tmp_path / depth
    args = ["warp-debug", *workspace.common(out), "--data", str(workspace.data), "--target", TARGET, "--nearby", NEARBY]
    assert main([*args, "--depth", depth]) == EXIT_OK
    for name in ("d_nt", "d_tilde", "residual", "unoccluded", "in_bounds"):
        assert (out / f"{name}.img").exists()
    assert (out / "residual.pgm").read_bytes().startswith(b"P5\n96 48\n255\n")


def test_warp_debug_corrected_depth(workspace: Workspace, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    args = ["warp-debug", *workspace.common(tmp_path), "--data", str(workspace.data), "--target", TARGET]
    args += ["--nearby", NEARBY, "--depth", "corrected"]
    assert main(args) == EXIT_CONFIG
    assert main([*args, "--checkpoint", str(workspace.run / "model.ckpt")]) == EXIT_OK
    assert "corrected inverse depth" in capsys.readouterr().out


def test_warp_debug_unknown_sample(workspace: Workspace, tmp_path: Path) -> None:
    args = ["warp-debug", *workspace.common(tmp_path), "--data", str(workspace.data)]
    assert main([*args, "--target", TARGET, "--nearby", "scene_009/loc_0000/top"]) == EXIT_DATA


def test_render_mesh(workspace: Workspace, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    args = ["render", *workspace.common(tmp_path), "--mesh", str(workspace.data / "scene_000" / "hq.obj")]
    assert main([*args, "--position", "0,0,1.6", "--name", "view"]) == EXIT_OK
    assert (tmp_path / "view.stack").exists()
    assert (tmp_path / "view_inverse_depth.pgm").exists()
    assert "covered" in capsys.readouterr().out


def test_render_rejects_degenerate_orientation(workspace: Workspace, tmp_path: Path) -> None:
    args = ["render", *workspace.common(tmp_path), "--mesh", str(workspace.data / "scene_000" / "hq.obj")]
    assert main([*args, "--forward", "0,0,1", "--down", "0,0,-1"]) == EXIT_CONFIG


def test_render_missing_mesh(tmp_path: Path) -> None:
    assert main(["render", "--profile", "", "--out", str(tmp_path), "--mesh", str(tmp_path / "none.obj")]) == EXIT_DATA


def test_unknown_config_key_exits_with_config_code(tmp_path: Path) -> None:
    args = ["generate", "--profile", "", "--out", str(tmp_path), "--set", "render.wdth=3"]
    assert main(args) == EXIT_CONFIG


def test_unknown_log_level(tmp_path: Path) -> None:
    assert main(["generate", "--out", str(tmp_path), "--log-level", "chatty"]) == EXIT_CONFIG


def test_missing_dataset_exits_with_data_code(tmp_path: Path) -> None:
    args = ["train", "--profile", "", "--out", str(tmp_path / "run"), "--data", str(tmp_path / "nowhere")]
    assert main(args) == EXIT_DATA


def test_usage_errors_use_config_code() -> None:
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        main(["compile"])
    assert info.value.code == EXIT_CONFIG
