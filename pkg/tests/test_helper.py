from __future__ import annotations

import io

import pytest
from rich.console import Console

from ddfusion.errors import ConfigError
from ddfusion.models import ProjectConfig
from ddfusion.utils.config import load_project_config
from ddfusion_helper import main
from ddfusion_helper.cli import DDFusionHelperApp
from ddfusion_helper.config_manager import SECTION_COMMENTS, ConfigManager


@pytest.fixture
def manager(tmp_path) -> ConfigManager:
    return ConfigManager(tmp_path / "conf" / "ddfusion.config.toml")


def test_reset_writes_loadable_defaults(manager):
    manager.reset()
    manager.save()
    text = manager.config_path.read_text(encoding="utf-8")
    for note in SECTION_COMMENTS.values():
        assert f"# {note}" in text
    assert load_project_config(manager.config_path) == ProjectConfig()


@pytest.mark.parametrize(
    ("raw", "expected"),
    [("12", 12), ("0.5", 0.5), ("true", True), ("[3, 5]", [3, 5]), ('"gaussian"', "gaussian"), ("runs/x", "runs/x")],
)
def test_set_value_parses_toml_literals(manager, raw, expected):
    assert manager.set_value("train.any", raw) == expected
    assert manager.document.unwrap()["train"]["any"] == expected


@pytest.mark.parametrize("key", ["train", "a.b.c", ".seed", "train."])
def test_set_value_rejects_bad_keys(manager, key):
    with pytest.raises(ConfigError):
        manager.set_value(key, "1")


def test_schema_issues_and_summary(manager):
    manager.reset()
    assert manager.schema_issues() == []
    manager.set_value("train.degradation_mode", '"rain"')
    assert len(manager.schema_issues()) == 1
    manager.set_value("blocks.channels", "32")
    summary = manager.summarize()
    assert summary["blocks"]["channels"] == 32
    assert summary["blocks"]["window_size"] == ProjectConfig().blocks.window_size
    assert "version" not in summary


def test_validate_checks_data_directory(manager, tmp_path):
    issues = manager.validate()
    assert any("不存在" in issue for issue in issues)
    data = tmp_path / "data"
    (data / "ir").mkdir(parents=True)
    manager.reset()
    manager.set_value("paths.data_dir", str(data))
    manager.save()
    issues = manager.validate()
    assert len(issues) == 1 and "vi" in issues[0]
    (data / "vi").mkdir()
    assert manager.validate() == []


def test_unparseable_file(manager):
    manager.config_path.parent.mkdir(parents=True)
    manager.config_path.write_text("[train\nseed = 1", encoding="utf-8")
    with pytest.raises(ConfigError):
        manager.load()
    assert main(["--config", str(manager.config_path), "show"]) == 2


def test_helper_app_commands(manager):
    buffer = io.StringIO()
    app = DDFusionHelperApp(manager.config_path, console=Console(file=buffer, width=120))
    assert app.init() == 0
    assert app.init() == 1
    assert app.init(force=True) == 0
    assert app.set("loss.gamma2", "3.0") == 0
    assert app.set("train.crop_size", "30") == 2
    assert load_project_config(manager.config_path).loss.gamma2 == 3.0
    assert app.show() == 0
    assert "gamma2 = 3.0" in buffer.getvalue()


def test_main_dispatches_subcommands(tmp_path):
    config = str(tmp_path / "ddfusion.config.toml")
    assert main(["--config", config, "init"]) == 0
    assert main(["--config", config, "set", "train.seed", "9"]) == 0
    assert load_project_config(config).train.seed == 9
    assert main(["--config", config, "show"]) == 0
