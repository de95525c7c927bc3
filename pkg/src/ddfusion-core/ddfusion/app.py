"""
ddfusion.app
============

应用对象：持有配置与日志，实现命令行的各个子命令。
``run.py`` 只负责解析参数与把异常转换为退出码。
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, TypeVar

import numpy as np
import pandas as pd
import tomlkit
from loguru import logger

from .checkpoint import Checkpoint
from .decomposition import frequency_decompose, retinex_decompose
from .errors import CheckpointError, ConfigError, ImageIOError, InvalidInputError, NumericError
from .gradchecks import BLOCK_CHECKS, LOSS_CHECKS, CheckResult, run_suite
from .ilgfn import fuse_image
from .imaging import degrade_infrared, degrade_visible, load_png, luminance, save_png
from .metrics import EvaluationTriple, MetricReport, evaluate
from .models import DegradationSpec, ProjectConfig
from .training import (
    DegradedPairDataset,
    StageResult,
    discover_pairs,
    draw_degradation,
    load_model,
    match_directories,
    train_stage1,
    train_stage2,
)
from .utils.config import load_project_config
from .utils.log import setup_log

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["name", "gaussian_sigma", "stripe_intensity", "stripe_orientation", "lowlight_gamma", "seed"]
DECOMPOSE_MODES = ("dct", "retinex")
STAGES = ("1", "2", "all")
RECOMPOSE_TOLERANCE = 1e-10
FLAT_RANGE = 1e-12

_T = TypeVar("_T")
_R = TypeVar("_R")


def _map(func: Callable[[_T], _R], items: Iterable[_T], jobs: int) -> list[_R]:
    items = list(items)
    if jobs < 1:
        raise InvalidInputError(f"--jobs 需为正整数，实际为 {jobs}")
    if jobs == 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def _rescale(component: np.ndarray) -> tuple[np.ndarray, float, float]:
    """仿射拉伸到 [0, 1]，返回 ``(图像, offset, scale)``，满足 ``原值 = 图像 * scale + offset``。"""

    low, high = float(component.min()), float(component.max())
    scale = high - low
    if scale <= FLAT_RANGE:
        return np.zeros_like(component), low, 0.0
    return (component - low) / scale, low, scale


class DDFusionApp:
    """
    DDFusion 批处理应用。

    :param config_path: TOML 配置文件路径。
    :type config_path: str | pathlib.Path
    :param require_config: 配置文件缺失时是否报错；为 ``False`` 时使用默认配置。
    :type require_config: bool
    :param log_level: 日志级别。
    :type log_level: str
    :raises ConfigError: 配置文件缺失（且 ``require_config``）或非法时。
    """

    def __init__(self, config_path: str | Path, require_config: bool = False, log_level: str = "INFO") -> None:
        self.config_path = Path(config_path).expanduser().resolve()
        if self.config_path.exists():
            self.config = load_project_config(self.config_path)
        elif require_config:
            raise ConfigError(f"配置文件不存在: {self.config_path}")
        else:
            self.config = ProjectConfig()
        self.work_dir = Path(self.config.paths.work_dir).expanduser()
        self.storage_root = self.work_dir / ".ddfusion"
        setup_log(self.storage_root / "ddfusion.log", level=log_level)
        logger.info(
            "app ready config=[{}] loaded=[{}] work_dir=[{}]",
            self.config_path, self.config_path.exists(), self.work_dir,
        )

    @property
    def stage1_checkpoint(self) -> Path:
        return self.work_dir / "stage1.ddfu"

    @property
    def stage2_checkpoint(self) -> Path:
        return self.work_dir / "stage2.ddfu"

    def stage_log(self, stage: int) -> Path:
        return self.work_dir / f"train_stage{stage}.csv"

    def degradation_for(
        self,
        index: int,
        sigma: float | None = None,
        stripe: float | None = None,
        orientation: str | None = None,
        gamma: float | None = None,
        seed: int | None = None,
    ) -> DegradationSpec:
        """
        第 ``index`` 个文件的退化参数。

        命令行参数优先；其次是 ``[degradation]`` 中非零的强度；其余强度按 ``[train]``
        中的区间逐文件抽取。抽样只依赖 ``(seed, index)``。
        """

        defaults = self.config.degradation
        if sigma is None and defaults.gaussian_sigma > 0:
            sigma = defaults.gaussian_sigma
        if stripe is None and defaults.stripe_intensity > 0:
            stripe = defaults.stripe_intensity
        base_seed = defaults.seed if seed is None else seed
        rng = np.random.default_rng([base_seed, index])
        return draw_degradation(
            rng,
            self.config.train,
            sigma=sigma,
            stripe=stripe,
            orientation=orientation or defaults.stripe_orientation,
            gamma=defaults.lowlight_gamma if gamma is None else gamma,
        )

    def degrade_directory(
        self,
        in_dir: str | Path,
        out_dir: str | Path,
        sigma: float | None = None,
        stripe: float | None = None,
        orientation: str | None = None,
        gamma: float | None = None,
        seed: int | None = None,
        jobs: int = 1,
    ) -> pd.DataFrame:
        """
        为 ``in_dir/{ir,vi}`` 中的每对图像合成退化版本，写入 ``out_dir/{ir,vi}`` 与清单。

        失败时删除本次已写出的全部文件。

        :returns: 清单表，每个文件一行。
        :rtype: pandas.DataFrame
        :raises DatasetError: 输入目录不满足成对约定时。
        :raises ImageIOError: 读写图像失败时。
        """

        pairs = discover_pairs(in_dir)
        out_dir = Path(out_dir)
        specs = [self.degradation_for(i, sigma, stripe, orientation, gamma, seed) for i in range(len(pairs))]
        written: list[Path] = []

        def run(item: tuple[int, tuple[str, Path, Path]]) -> list[Path]:
            index, (name, ir_path, vi_path) = item
            spec = specs[index]
            targets = [out_dir / "ir" / name, out_dir / "vi" / name]
            save_png(degrade_infrared(load_png(ir_path), spec), targets[0])
            written.append(targets[0])
            save_png(degrade_visible(load_png(vi_path), spec), targets[1])
            written.append(targets[1])
            return targets

        try:
            _map(run, enumerate(pairs), jobs)
            manifest = pd.DataFrame(
                [{"name": name, **spec.to_mapping()} for (name, _, _), spec in zip(pairs, specs)],
                columns=MANIFEST_COLUMNS,
            )
            manifest_path = out_dir / MANIFEST_NAME
            written.append(manifest_path)
            manifest.to_csv(manifest_path, index=False, float_format="%.10g")
        except (OSError, ValueError) as error:
            for path in written:
                path.unlink(missing_ok=True)
            logger.error("degrade failed removed=[{}] error=[{}]", len(written), error)
            if isinstance(error, ImageIOError) or not isinstance(error, OSError):
                raise
            raise ImageIOError(f"写入 {out_dir} 失败: {error}") from error
        logger.info("degrade done in=[{}] out=[{}] pairs=[{}]", in_dir, out_dir, len(pairs))
        return manifest

    def decompose_image(
        self,
        image: str | Path,
        out_dir: str | Path,
        mode: str = "dct",
        tau: float | None = None,
        sigma: float | None = None,
    ) -> list[Path]:
        """
        把单幅图像的亮度分解为两个分量并写出拉伸后的 PNG 与 TOML 缩放记录。

        ``dct`` 模式写出 ``<stem>_low.png`` / ``<stem>_high.png``；
        ``retinex`` 模式写出 ``<stem>_reflectance.png`` / ``<stem>_illumination.png``。

        :returns: 写出的文件路径（分量在前，缩放记录在最后）。
        :rtype: list[pathlib.Path]
        :raises NumericError: Retinex 分量相乘不能还原输入时。
        """

        if mode not in DECOMPOSE_MODES:
            raise InvalidInputError(f"mode 需为 {DECOMPOSE_MODES} 之一，实际为 {mode!r}")
        image = Path(image)
        plane = luminance(load_png(image))[0]
        if mode == "dct":
            tau = self.config.train.tau if tau is None else tau
            low, high = frequency_decompose(plane, tau)
            components = {"low": low, "high": high}
            error = float(np.abs(low + high - plane).max())
        else:
            sigma = self.config.train.retinex_sigma if sigma is None else sigma
            pair = retinex_decompose(plane, sigma=sigma)
            components = {"reflectance": pair.reflectance, "illumination": pair.illumination}
            error = float(np.abs(pair.recompose() - plane).max())
        if error > RECOMPOSE_TOLERANCE:
            raise NumericError(f"{image} 的分量无法还原输入，最大误差 {error:.3e}")

        out_dir = Path(out_dir)
        scaling = tomlkit.document()
        scaling.add("source", str(image))
        scaling.add("mode", mode)
        if mode == "dct":
            scaling.add("tau", tau)
        else:
            scaling.add("sigma", sigma)
        scaling.add("max_recompose_error", error)
        paths: list[Path] = []
        for name, component in components.items():
            rescaled, offset, scale = _rescale(component)
            path = out_dir / f"{image.stem}_{name}.png"
            save_png(rescaled[None], path)
            paths.append(path)
            table = tomlkit.table()
            table.add("file", path.name)
            table.add("offset", offset)
            table.add("scale", scale)
            scaling.add(name, table)
        sidecar = out_dir / f"{image.stem}_scaling.toml"
        sidecar.write_text(tomlkit.dumps(scaling), encoding="utf-8")
        paths.append(sidecar)
        logger.info("decompose done image=[{}] mode=[{}] error=[{:.3e}]", image, mode, error)
        return paths

    def train(self, stage: str = "all", resume: bool = False) -> dict[int, StageResult]:
        """
        运行训练阶段并把检查点与 CSV 日志写入 ``work_dir``。

        :param stage: ``1`` / ``2`` / ``all``；``all`` 先训练阶段一再把检查点交给阶段二。
        :type stage: str
        :param resume: 是否从对应阶段已有的检查点继续。
        :type resume: bool
        :returns: 阶段号到训练产物的映射。
        :rtype: dict[int, StageResult]
        :raises CheckpointError: 阶段二缺少阶段一检查点时。
        """

        if stage not in STAGES:
            raise InvalidInputError(f"stage 需为 {STAGES} 之一，实际为 {stage!r}")
        cfg = self.config
        dataset = DegradedPairDataset.from_directory(Path(cfg.paths.data_dir).expanduser(), cfg)
        results: dict[int, StageResult] = {}

        if stage in ("1", "all"):
            previous = Checkpoint.load(self.stage1_checkpoint) if resume and self.stage1_checkpoint.exists() else None
            result = train_stage1(dataset, cfg, log_path=self.stage_log(1), resume=previous)
            result.checkpoint.save(self.stage1_checkpoint)
            results[1] = result

        if stage in ("2", "all"):
            if 1 in results:
                ddon_checkpoint = results[1].checkpoint
            elif self.stage1_checkpoint.exists():
                ddon_checkpoint = Checkpoint.load(self.stage1_checkpoint)
            else:
                raise CheckpointError(f"阶段二需要阶段一检查点: {self.stage1_checkpoint}")
            previous = Checkpoint.load(self.stage2_checkpoint) if resume and self.stage2_checkpoint.exists() else None
            result = train_stage2(dataset, ddon_checkpoint, cfg, log_path=self.stage_log(2), resume=previous)
            result.checkpoint.save(self.stage2_checkpoint)
            results[2] = result
        return results

    def fuse_directory(
        self,
        checkpoint: str | Path,
        ir_dir: str | Path,
        vi_dir: str | Path,
        out_dir: str | Path,
        jobs: int = 1,
    ) -> list[Path]:
        """
        用检查点融合两个目录中同名的图像对，输出与可见光同通道数的 PNG。

        :returns: 写出的文件路径，按文件名排序。
        :rtype: list[pathlib.Path]
        :raises DatasetError: 存在未配对文件时。
        """

        names = match_directories(ir_dir, vi_dir)
        model = load_model(Checkpoint.load(checkpoint))
        out_dir = Path(out_dir)

        def run(name: str) -> Path:
            fused = fuse_image(model, load_png(Path(ir_dir) / name), load_png(Path(vi_dir) / name))
            target = out_dir / name
            save_png(fused, target)
            return target

        paths = _map(run, names, jobs)
        logger.info("fuse done checkpoint=[{}] out=[{}] pairs=[{}]", checkpoint, out_dir, len(paths))
        return paths

    def evaluate_directories(
        self,
        ir_dir: str | Path,
        vi_dir: str | Path,
        fused_dir: str | Path,
        out_csv: str | Path,
        markdown: str | Path | None = None,
        jobs: int = 1,
    ) -> MetricReport:
        """
        逐对计算融合指标，写出 CSV（及可选的 Markdown 摘要）。

        :raises DatasetError: 三个目录的文件名不一致时。
        :raises InvalidInputError: 同名图像尺寸不一致时。
        """

        names = match_directories(ir_dir, vi_dir, fused_dir)

        def load(name: str) -> EvaluationTriple:
            triple = EvaluationTriple(
                name=name,
                ir=load_png(Path(ir_dir) / name),
                vi=load_png(Path(vi_dir) / name),
                fused=load_png(Path(fused_dir) / name),
            )
            sizes = {img.shape[1:] for img in (triple.ir, triple.vi, triple.fused)}
            if len(sizes) != 1:
                raise InvalidInputError(f"{name} 的三幅图像尺寸不一致: {sorted(sizes)}")
            return triple

        triples = _map(load, names, jobs)
        report = evaluate(triples, jobs=jobs)
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(out_csv)
        if markdown is not None:
            markdown = Path(markdown)
            markdown.parent.mkdir(parents=True, exist_ok=True)
            markdown.write_text(report.to_markdown(), encoding="utf-8")
        logger.info("evaluate done pairs=[{}] csv=[{}] failures=[{}]", len(names), out_csv, len(report.failures))
        return report

    def gradcheck(self, loss: str | None = None, seed: int = 0) -> list[CheckResult]:
        """运行梯度校验；给出 ``loss`` 时只校验该损失，否则校验全部损失与模块。"""

        if loss is not None:
            return run_suite(losses=(loss,), blocks=(), seed=seed)
        return run_suite(losses=LOSS_CHECKS, blocks=BLOCK_CHECKS, seed=seed)
