from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import tomlkit
from click.testing import CliRunner

from ddfusion.app import MANIFEST_COLUMNS, MANIFEST_NAME
from ddfusion.checkpoint import Checkpoint
from ddfusion.gradchecks import BLOCK_CHECKS, LOSS_CHECKS
from ddfusion.imaging import load_png, save_png
from ddfusion.run import cli

from conftest import small_config, synthetic_scene, write_pairs


@pytest.fixture
def runner(tmp_path, monkeypatch) -> CliRunner:
    monkeypatch.chdir(tmp_path)
    return CliRunner()


def invoke(runner: CliRunner, *args: str, config: Path | None = None):
    options = ["--log-level", "WARNING"]
    if config is not None:
        options = ["--config", str(config), *options]
    return runner.invoke(cli, [*options, *args])


def write_config(path: Path, data_dir: Path, work_dir: Path, **train) -> Path:
    mapping = small_config(data_dir, work_dir, **train).to_mapping()
    path.write_text(tomlkit.dumps(mapping), encoding="utf-8")
    return path


def _bytes(directory: Path) -> dict[str, bytes]:
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_degrade_writes_pairs_and_manifest(runner, pair_root, tmp_path):
    result = invoke(runner, "degrade", str(pair_root), "out", "--seed", "3")
    assert result.exit_code == 0, result.output
    manifest = pd.read_csv(tmp_path / "out" / MANIFEST_NAME)
    assert list(manifest.columns) == MANIFEST_COLUMNS
    assert manifest["name"].tolist() == ["pair_00.png", "pair_01.png", "pair_02.png"]
    assert manifest["gaussian_sigma"].between(5.0, 30.0).all()
    assert manifest["stripe_intensity"].between(10.0, 30.0).all()
    assert load_png(tmp_path / "out" / "vi" / "pair_01.png").shape == (3, 32, 32)

    again = invoke(runner, "degrade", str(pair_root), "again", "--seed", "3")
    assert again.exit_code == 0
    assert _bytes(tmp_path / "out") == _bytes(tmp_path / "again")


def test_degrade_with_explicit_strengths(runner, pair_root, tmp_path):
    result = invoke(runner, "degrade", str(pair_root), "out", "--sigma", "10", "--stripe", "0", "--jobs", "2")
    assert result.exit_code == 0, result.output
    manifest = pd.read_csv(tmp_path / "out" / MANIFEST_NAME)
    assert (manifest["gaussian_sigma"] == 10.0).all()
    assert (manifest["stripe_intensity"] == 0.0).all()


def test_degrade_rejects_bad_input(runner, pair_root, tmp_path):
    (tmp_path / "empty" / "ir").mkdir(parents=True)
    (tmp_path / "empty" / "vi").mkdir(parents=True)
    assert invoke(runner, "degrade", "empty", "out").exit_code == 2
    assert invoke(runner, "degrade", str(pair_root), "out", "--sigma", "40").exit_code == 2
    assert not (tmp_path / "out" / MANIFEST_NAME).exists()


def _component(out: Path, sidecar: dict, name: str) -> np.ndarray:
    entry = sidecar[name]
    return load_png(out / entry["file"])[0] * entry["scale"] + entry["offset"]


def test_decompose_dct(runner, tmp_path):
    plane = synthetic_scene(5, 32)
    save_png(plane, tmp_path / "scene.png")
    result = invoke(runner, "decompose", "scene.png", "parts", "--mode", "dct")
    assert result.exit_code == 0, result.output
    out = tmp_path / "parts"
    assert sorted(p.name for p in out.iterdir()) == ["scene_high.png", "scene_low.png", "scene_scaling.toml"]
    sidecar = tomlkit.parse((out / "scene_scaling.toml").read_text(encoding="utf-8")).unwrap()
    assert sidecar["mode"] == "dct"
    assert sidecar["tau"] == 0.25
    assert sidecar["max_recompose_error"] < 1e-10
    recomposed = _component(out, sidecar, "low") + _component(out, sidecar, "high")
    tolerance = (sidecar["low"]["scale"] + sidecar["high"]["scale"]) / 255.0
    np.testing.assert_allclose(recomposed, load_png(tmp_path / "scene.png")[0], atol=tolerance)


def test_decompose_dc_only_low_band_is_flat(runner, tmp_path):
    save_png(synthetic_scene(6, 16), tmp_path / "scene.png")
    assert invoke(runner, "decompose", "scene.png", "parts", "--tau", "0").exit_code == 0
    sidecar = tomlkit.parse((tmp_path / "parts" / "scene_scaling.toml").read_text(encoding="utf-8")).unwrap()
    assert sidecar["low"]["scale"] == 0.0
    assert sidecar["low"]["offset"] == pytest.approx(load_png(tmp_path / "scene.png").mean(), abs=1e-9)
    assert not load_png(tmp_path / "parts" / "scene_low.png").any()


def test_decompose_retinex(runner, tmp_path):
    save_png(synthetic_scene(7, 32, channels=3), tmp_path / "scene.png")
    result = invoke(runner, "decompose", "scene.png", "parts", "--mode", "retinex", "--sigma", "5")
    assert result.exit_code == 0, result.output
    sidecar = tomlkit.parse((tmp_path / "parts" / "scene_scaling.toml").read_text(encoding="utf-8")).unwrap()
    assert sidecar["mode"] == "retinex"
    assert sidecar["sigma"] == 5.0
    assert (tmp_path / "parts" / "scene_reflectance.png").is_file()
    assert (tmp_path / "parts" / "scene_illumination.png").is_file()


def test_train_requires_config(runner):
    assert invoke(runner, "train", config=Path("absent.toml")).exit_code == 2


def test_train_fuse_evaluate(runner, pair_root, tmp_path):
    config = write_config(tmp_path / "ddfusion.config.toml", pair_root, tmp_path / "work")
    result = invoke(runner, "train", config=config)
    assert result.exit_code == 0, result.output
    work = tmp_path / "work"
    assert len(pd.read_csv(work / "train_stage1.csv")) == 3
    assert len(pd.read_csv(work / "train_stage2.csv")) == 3
    stage2 = Checkpoint.load(work / "stage2.ddfu")
    assert stage2.segment_digest("ddon") == Checkpoint.load(work / "stage1.ddfu").segment_digest("ddon")
    assert (work / ".ddfusion" / "ddfusion.log").is_file()

    ir_dir, vi_dir = str(pair_root / "ir"), str(pair_root / "vi")
    fused = invoke(runner, "fuse", str(work / "stage2.ddfu"), ir_dir, vi_dir, "fused", config=config)
    assert fused.exit_code == 0, fused.output
    again = invoke(runner, "fuse", str(work / "stage2.ddfu"), ir_dir, vi_dir, "fused2", "--jobs", "2", config=config)
    assert again.exit_code == 0
    assert _bytes(tmp_path / "fused") == _bytes(tmp_path / "fused2")
    assert load_png(tmp_path / "fused" / "pair_00.png").shape == (3, 32, 32)

    report = invoke(runner, "evaluate", ir_dir, vi_dir, "fused", "metrics.csv", "--markdown", "metrics.md", config=config)
    assert report.exit_code == 0, report.output
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "pair,vif,ag,ei,qabf,sf,qw"
    assert len(lines) == 5
    assert lines[-1].startswith("mean,")
    assert (tmp_path / "metrics.md").read_text(encoding="utf-8").startswith("# ")


def test_train_resume_extends_stage1(runner, pair_root, tmp_path):
    config = write_config(tmp_path / "ddfusion.config.toml", pair_root, tmp_path / "work")
    assert invoke(runner, "train", "--stage", "1", config=config).exit_code == 0
    assert invoke(runner, "config", "set", "train.stage1_steps", "4", config=config).exit_code == 0
    result = invoke(runner, "train", "--stage", "1", "--resume", config=config)
    assert result.exit_code == 0, result.output
    assert pd.read_csv(tmp_path / "work" / "train_stage1.csv")["step"].tolist() == [0, 1, 2, 3]
    assert Checkpoint.load(tmp_path / "work" / "stage1.ddfu").steps["stage1"] == 4


def test_stage2_without_stage1_checkpoint(runner, pair_root, tmp_path):
    config = write_config(tmp_path / "ddfusion.config.toml", pair_root, tmp_path / "work")
    assert invoke(runner, "train", "--stage", "2", config=config).exit_code == 2


def test_fuse_rejects_unpaired_directories(runner, pair_root, tmp_path):
    save_png(synthetic_scene(1, 32), pair_root / "ir" / "lonely.png")
    result = invoke(runner, "fuse", "missing.ddfu", str(pair_root / "ir"), str(pair_root / "vi"), "fused")
    assert result.exit_code == 2


def test_evaluate_rejects_misaligned_images(runner, tmp_path):
    for sub, size in (("ir", 48), ("vi", 48), ("fused", 40)):
        save_png(synthetic_scene(2, size), tmp_path / sub / "a.png")
    assert invoke(runner, "evaluate", "ir", "vi", "fused", "metrics.csv").exit_code == 2
    assert not (tmp_path / "metrics.csv").exists()


def test_gradcheck_single_loss(runner):
    result = invoke(runner, "gradcheck", "--loss", "tv")
    assert result.exit_code == 0, result.output
    assert len(re.findall(r"^\S+\s+error=", result.output, flags=re.MULTILINE)) == 1


@pytest.mark.parametrize("args", [("--loss", "ssim"), (), ("--all", "--loss", "tv")])
def test_gradcheck_usage_errors(runner, args):
    assert invoke(runner, "gradcheck", *args).exit_code == 2


@pytest.mark.slow
def test_gradcheck_all(runner):
    result = invoke(runner, "gradcheck", "--all")
    assert result.exit_code == 0, result.output
    assert len(re.findall(r"^\S+\s+error=", result.output, flags=re.MULTILINE)) == len(LOSS_CHECKS) + len(BLOCK_CHECKS)


def test_config_commands(runner, pair_root, tmp_path):
    config = tmp_path / "ddfusion.config.toml"
    assert invoke(runner, "config", "init", config=config).exit_code == 0
    assert config.is_file()
    assert invoke(runner, "config", "init", config=config).exit_code == 1
    assert invoke(runner, "config", "show", config=config).exit_code == 0
    assert invoke(runner, "config", "set", "train.batch_size", "4", config=config).exit_code == 0
    assert "batch_size = 4" in config.read_text(encoding="utf-8")
    assert invoke(runner, "config", "set", "train.batch_size", "0", config=config).exit_code == 2
    assert "batch_size = 4" in config.read_text(encoding="utf-8")
    assert invoke(runner, "config", "validate", config=config).exit_code == 2
    assert invoke(runner, "config", "set", "paths.data_dir", str(pair_root), config=config).exit_code == 0
    assert invoke(runner, "config", "validate", config=config).exit_code == 0


@pytest.mark.slow
def test_end_to_end_is_reproducible(runner, tmp_path):
    write_pairs(tmp_path / "clean", 4, size=64, rgb=True)

    def pipeline(tag: str) -> bytes:
        config = write_config(tmp_path / f"{tag}.toml", tmp_path / "clean", tmp_path / tag, crop_size=32)
        steps = [
            ("degrade", str(tmp_path / "clean"), f"{tag}_test", "--seed", "11"),
            ("train",),
            ("fuse", f"{tag}/stage2.ddfu", f"{tag}_test/ir", f"{tag}_test/vi", f"{tag}_fused"),
            ("evaluate", f"{tag}_test/ir", f"{tag}_test/vi", f"{tag}_fused", f"{tag}.csv"),
        ]
        for args in steps:
            result = invoke(runner, *args, config=config)
            assert result.exit_code == 0, (args, result.output)
        return (tmp_path / f"{tag}.csv").read_bytes()

    first = pipeline("a")
    frame = pd.read_csv(tmp_path / "a.csv")
    assert list(frame.columns) == ["pair", "vif", "ag", "ei", "qabf", "sf", "qw"]
    assert frame.drop(columns="pair").notna().all().all()
    assert pipeline("b") == first
