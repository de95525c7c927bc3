from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings
from loguru import logger

from ddfusion.imaging import save_png
from ddfusion.models import BlockConfig, LossWeights, PathsConfig, ProjectConfig, TrainConfig

settings.register_profile(
    "ddfusion",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.load_profile("ddfusion")


@pytest.fixture(autouse=True)
def _reset_logging():
    yield
    logger.remove()


SMALL_BLOCKS = BlockConfig(
    channels=8,
    window_size=4,
    heads=2,
    mlp_ratio=2.0,
    msconv_kernels=(1, 3, 5, 7),
    local_kernels=(3, 5, 7),
    rdscb_repeat=2,
    cbam_reduction=4,
    gn_groups=2,
    leaky_slope=0.2,
)


def synthetic_scene(seed: int, size: int = 64, channels: int = 1) -> np.ndarray:
    """平滑渐变叠加若干亮块，数值保持在 (0.1, 0.9) 内。"""

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 0.3 + 0.2 * yy + 0.15 * np.sin(2 * np.pi * xx * rng.uniform(1, 3))
    for _ in range(3):
        top, left = rng.integers(0, size - size // 4, size=2)
        base[top : top + size // 4, left : left + size // 4] += rng.uniform(0.05, 0.25)
    planes = [np.clip(base + 0.02 * k, 0.1, 0.9) for k in range(channels)]
    return np.stack(planes, axis=0)


def write_pairs(root: Path, count: int, size: int = 64, rgb: bool = False) -> list[str]:
    names = []
    for index in range(count):
        name = f"pair_{index:02d}.png"
        save_png(synthetic_scene(100 + index, size, 1), root / "ir" / name)
        save_png(synthetic_scene(200 + index, size, 3 if rgb else 1), root / "vi" / name)
        names.append(name)
    return names


def small_config(data_dir: Path, work_dir: Path, **train) -> ProjectConfig:
    options = {
        "crop_size": 16,
        "batch_size": 2,
        "stage1_steps": 3,
        "stage2_steps": 3,
        "log_every": 1,
        "seed": 7,
    }
    options.update(train)
    return ProjectConfig(
        paths=PathsConfig(data_dir=str(data_dir), work_dir=str(work_dir)),
        train=TrainConfig(**options),
        blocks=SMALL_BLOCKS,
        loss=LossWeights(),
    )


@pytest.fixture
def small_blocks() -> BlockConfig:
    return SMALL_BLOCKS


@pytest.fixture
def pair_root(tmp_path: Path) -> Path:
    root = tmp_path / "data"
    write_pairs(root, 3, size=32, rgb=True)
    return root


@pytest.fixture
def small_project(pair_root: Path, tmp_path: Path) -> ProjectConfig:
    return small_config(pair_root, tmp_path / "work")


@pytest.fixture
def probe() -> torch.Generator:
    return torch.Generator().manual_seed(0)
