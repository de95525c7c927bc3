"""
ddfusion.training
=================

数据集构建与两阶段训练：

1. 阶段一：以 ``L_do`` 训练 DDON（含图像头）；
2. 阶段二：冻结 DDON，以 ``L_fu`` 训练 ILGFN 与重建头。

每一步的批次只由 ``(seed, step)`` 决定，因此固定种子下损失曲线可复现，
从检查点恢复后下一步的损失与不中断训练逐位一致。
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from loguru import logger

from .checkpoint import Checkpoint, parameter_digest
from .errors import CheckpointError, DatasetError, InvalidInputError, NumericError
from .ilgfn import DDFusion
from .imaging import (
    check_image,
    degrade_infrared,
    degrade_visible,
    load_png,
    luminance,
    reference_enhance,
)
from .losses import PerceptualExtractor, loss_do, loss_fu
from .models import DegradationSpec, Orientation, ProjectConfig, TrainConfig

STAGE1_COLUMNS = ["step", "l_total", "l_ir", "l_vi", "l_illu", "l_tv", "l_per"]
STAGE2_COLUMNS = ["step", "l_total", "l_int", "l_text"]


def match_directories(*dirs: str | Path) -> list[str]:
    """
    按文件名对齐多个目录中的 PNG。

    :param dirs: 待对齐的目录。
    :type dirs: str | pathlib.Path
    :returns: 所有目录共有的文件名，已排序。
    :rtype: list[str]
    :raises DatasetError: 目录缺失、为空或存在只出现在部分目录中的文件时。
    """

    paths = [Path(d) for d in dirs]
    missing = [str(d) for d in paths if not d.is_dir()]
    if missing:
        raise DatasetError("数据目录缺失", missing)
    names = [{p.name for p in d.glob("*.png")} for d in paths]
    union = set().union(*names)
    common = set.intersection(*names)
    unpaired = union - common
    if unpaired:
        raise DatasetError(f"{', '.join(map(str, paths))} 中存在未配对的文件", list(unpaired))
    if not common:
        raise DatasetError(f"{', '.join(map(str, paths))} 中没有 PNG 图像")
    return sorted(common)


def discover_pairs(root: str | Path) -> list[tuple[str, Path, Path]]:
    """
    在 ``root/ir`` 与 ``root/vi`` 中按同名 PNG 配对。

    :returns: ``(文件名, 红外路径, 可见光路径)`` 列表，按文件名排序。
    :rtype: list[tuple[str, pathlib.Path, pathlib.Path]]
    :raises DatasetError: 目录缺失、为空或存在未配对文件时。
    """

    root = Path(root)
    ir_dir, vi_dir = root / "ir", root / "vi"
    return [(name, ir_dir / name, vi_dir / name) for name in match_directories(ir_dir, vi_dir)]


def draw_degradation(
    rng: np.random.Generator,
    train: TrainConfig,
    sigma: float | None = None,
    stripe: float | None = None,
    orientation: Orientation | None = None,
    gamma: float | None = None,
) -> DegradationSpec:
    """
    按训练配置抽取一次退化参数；显式给出的量不再抽样。

    ``mixed`` 模式先在 ``both`` / ``gaussian`` / ``stripe`` 中等概率选一种。
    """

    mode = train.degradation_mode
    if mode == "mixed":
        mode = ("both", "gaussian", "stripe")[int(rng.integers(0, 3))]
    drawn_sigma = float(rng.uniform(*train.sigma_range))
    drawn_stripe = float(rng.uniform(*train.stripe_range))
    if mode == "gaussian":
        drawn_stripe = 0.0
    elif mode == "stripe":
        drawn_sigma = 0.0
    return DegradationSpec(
        gaussian_sigma=drawn_sigma if sigma is None else sigma,
        stripe_intensity=drawn_stripe if stripe is None else stripe,
        stripe_orientation=orientation or train.stripe_orientation,
        lowlight_gamma=train.darken_gamma if gamma is None else gamma,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


@dataclass(frozen=True, slots=True)
class SamplePair:
    """
    一个训练样本，全部字段空间对齐。

    :param ir_clean: 干净红外 ``(1, h, w)``，作为红外参考。
    :param ir_degraded: 退化红外 ``(1, h, w)``。
    :param vi_degraded: 退化可见光（RGB 或灰度）。
    :param vi_reference: 参考增强后的可见光。
    :param spec: 实际使用的退化参数。
    """

    name: str
    ir_clean: np.ndarray
    ir_degraded: np.ndarray
    vi_degraded: np.ndarray
    vi_reference: np.ndarray
    spec: DegradationSpec

    @property
    def vi_degraded_y(self) -> np.ndarray:
        return luminance(self.vi_degraded)

    @property
    def vi_reference_y(self) -> np.ndarray:
        return luminance(self.vi_reference)


class DegradedPairDataset(Sequence):
    """
    按需合成退化样本的数据集。

    样本 ``sample(index, draw)`` 是 ``(文件, seed, index, draw)`` 的纯函数：
    裁剪窗口、噪声强度与噪声种子都由 ``default_rng([seed, draw, index])`` 抽取。

    :param pairs: ``(名称, 红外图, 可见光图)`` 列表，图像为 ``(C, H, W)``。
    :type pairs: list[tuple[str, numpy.ndarray, numpy.ndarray]]
    :param cfg: 项目配置。
    :type cfg: ProjectConfig
    """

    def __init__(self, pairs: list[tuple[str, np.ndarray, np.ndarray]], cfg: ProjectConfig) -> None:
        if not pairs:
            raise DatasetError("数据集为空")
        crop = cfg.train.crop_size
        mismatched = [name for name, ir, vi in pairs if ir.shape[1:] != vi.shape[1:]]
        if mismatched:
            raise DatasetError("红外与可见光尺寸不一致", mismatched)
        too_small = [name for name, ir, _ in pairs if min(ir.shape[1:]) < crop]
        if too_small:
            raise DatasetError(f"图像小于裁剪尺寸 {crop}", too_small)
        self.pairs = [(name, luminance(check_image(ir)), check_image(vi)) for name, ir, vi in pairs]
        self.cfg = cfg

    @classmethod
    def from_directory(cls, root: str | Path, cfg: ProjectConfig) -> "DegradedPairDataset":
        pairs = [(name, load_png(ir), load_png(vi)) for name, ir, vi in discover_pairs(root)]
        logger.info("dataset loaded root=[{}] pairs=[{}]", root, len(pairs))
        return cls(pairs, cfg)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> SamplePair:  # type: ignore[override]
        if not -len(self) <= index < len(self):
            raise IndexError(index)
        return self.sample(index % len(self), draw=0)

    def sample(self, index: int, draw: int = 0) -> SamplePair:
        """
        合成第 ``index`` 对图像的一个样本。

        :param index: 图像对下标。
        :type index: int
        :param draw: 抽样编号，不同编号给出不同的裁剪与噪声。
        :type draw: int
        :returns: 对齐的样本。
        :rtype: SamplePair
        """

        name, ir, vi = self.pairs[index]
        rng = np.random.default_rng([self.cfg.train.seed, draw, index])
        crop = self.cfg.train.crop_size
        _, h, w = ir.shape
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        ir_crop = ir[:, top : top + crop, left : left + crop].copy()
        vi_crop = vi[:, top : top + crop, left : left + crop].copy()
        spec = draw_degradation(rng, self.cfg.train)
        return SamplePair(
            name=name,
            ir_clean=ir_crop,
            ir_degraded=degrade_infrared(ir_crop, spec),
            vi_degraded=degrade_visible(vi_crop, spec),
            vi_reference=reference_enhance(vi_crop),
            spec=spec,
        )

    def batch(self, step: int, size: int) -> dict[str, torch.Tensor]:
        """
        第 ``step`` 步的训练批次，只依赖 ``(seed, step)``。

        :returns: ``ir_de`` / ``vi_de`` / ``ir_ref`` / ``vi_ref`` 四个 ``(B, 1, h, w)`` float32 张量。
        :rtype: dict[str, torch.Tensor]
        """

        rng = np.random.default_rng([self.cfg.train.seed, step])
        indices = rng.integers(0, len(self), size=size)
        samples = [self.sample(int(i), draw=step * size + j + 1) for j, i in enumerate(indices)]
        return collate(samples)


def collate(samples: list[SamplePair]) -> dict[str, torch.Tensor]:
    def stack(planes: list[np.ndarray]) -> torch.Tensor:
        return torch.from_numpy(np.stack(planes)).to(torch.float32)

    return {
        "ir_de": stack([s.ir_degraded for s in samples]),
        "vi_de": stack([s.vi_degraded_y for s in samples]),
        "ir_ref": stack([s.ir_clean for s in samples]),
        "vi_ref": stack([s.vi_reference_y for s in samples]),
    }


@dataclass
class StageResult:
    """训练阶段的产物：检查点与本次运行的逐步损失表。"""

    checkpoint: Checkpoint
    log: pd.DataFrame


def _adam(params, cfg: ProjectConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.train.learning_rate, betas=(0.9, 0.999), weight_decay=0.0)


def _flush_log(rows: list[dict[str, float]], columns: list[str], log_path: Path | None, append: bool) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=columns)
    if log_path is not None and rows:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        write_header = not (append and log_path.exists())
        frame.to_csv(log_path, mode="a" if not write_header else "w", header=write_header, index=False)
    return frame


def _check_finite(total: torch.Tensor, step: int, stage: int) -> None:
    if not torch.isfinite(total):
        raise NumericError(f"阶段{stage}损失出现非有限值", step=step)


def train_stage1(
    dataset: DegradedPairDataset,
    cfg: ProjectConfig,
    log_path: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> StageResult:
    """
    阶段一：以 ``L_do`` 优化 DDON 参数。

    :param dataset: 训练数据集。
    :type dataset: DegradedPairDataset
    :param cfg: 项目配置。
    :type cfg: ProjectConfig
    :param log_path: 逐步损失 CSV 路径，恢复训练时追加写入。
    :type log_path: str | pathlib.Path | None
    :param resume: 阶段一检查点，从其记录的步数继续。
    :type resume: Checkpoint | None
    :returns: 检查点与损失表。
    :rtype: StageResult
    :raises NumericError: 损失出现非有限值时，消息中带步数。
    """

    torch.manual_seed(cfg.train.seed)
    model = DDFusion.from_config(cfg)
    optimizer = _adam(model.ddon.parameters(), cfg)
    start = 0
    if resume is not None:
        if resume.stage != 1:
            raise CheckpointError(f"阶段一只能从阶段一检查点恢复，实际为阶段 {resume.stage}")
        resume.load_into(model)
        resume.restore_optimizer(optimizer, model)
        start = resume.steps.get("stage1", 0)
    extractor = PerceptualExtractor(cfg.train.perceptual_seed)
    weights = cfg.loss
    total_steps = cfg.train.stage1_steps
    logger.info("stage1 start from=[{}] to=[{}] batch=[{}]", start, total_steps, cfg.train.batch_size)

    model.train()
    rows: list[dict[str, float]] = []
    log_path = Path(log_path) if log_path is not None else None
    try:
        for step in range(start, total_steps):
            batch = dataset.batch(step, cfg.train.batch_size)
            ir_en, vi_en = model.enhance(batch["ir_de"], batch["vi_de"])
            total, terms = loss_do(ir_en, vi_en, batch["ir_ref"], batch["vi_ref"], weights, extractor)
            _check_finite(total, step, 1)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            row = {"step": step, "l_total": float(total.detach())}
            row.update({k: float(v.detach()) for k, v in terms.items()})
            rows.append(row)
            if step % cfg.train.log_every == 0 or step == total_steps - 1:
                logger.info(
                    "stage1 step=[{}] l_total=[{:.6f}] l_ir=[{:.6f}] l_vi=[{:.6f}] l_illu=[{:.6f}] l_tv=[{:.6f}] l_per=[{:.6f}]",
                    step, row["l_total"], row["l_ir"], row["l_vi"], row["l_illu"], row["l_tv"], row["l_per"],
                )
    finally:
        frame = _flush_log(rows, STAGE1_COLUMNS, log_path, append=resume is not None)

    checkpoint = Checkpoint.from_model(
        model, cfg, stage=1, steps={"stage1": max(total_steps, start), "stage2": 0}, optimizer=optimizer
    )
    return StageResult(checkpoint=checkpoint, log=frame)


def train_stage2(
    dataset: DegradedPairDataset,
    ddon_checkpoint: Checkpoint,
    cfg: ProjectConfig,
    log_path: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> StageResult:
    """
    阶段二：冻结 DDON，以 ``L_fu`` 优化 ILGFN 与重建头。

    训练前后比较 DDON 参数摘要，任何改动都视为错误。

    :param dataset: 训练数据集。
    :type dataset: DegradedPairDataset
    :param ddon_checkpoint: 阶段一检查点，只使用其中的 ``ddon.*`` 段。
    :type ddon_checkpoint: Checkpoint
    :param cfg: 项目配置。
    :type cfg: ProjectConfig
    :param log_path: 逐步损失 CSV 路径。
    :type log_path: str | pathlib.Path | None
    :param resume: 阶段二检查点，从其记录的步数继续。
    :type resume: Checkpoint | None
    :returns: 检查点与损失表。
    :rtype: StageResult
    :raises NumericError: 损失出现非有限值时。
    :raises CheckpointError: 检查点阶段不符或 DDON 参数被修改时。
    """

    torch.manual_seed(cfg.train.seed)
    model = DDFusion.from_config(cfg)
    ddon_checkpoint.load_into(model, prefix="ddon")
    for param in model.ddon.parameters():
        param.requires_grad_(False)
    optimizer = _adam(model.ilgfn.parameters(), cfg)
    start = 0
    if resume is not None:
        if resume.stage != 2:
            raise CheckpointError(f"阶段二只能从阶段二检查点恢复，实际为阶段 {resume.stage}")
        if resume.segment_digest("ddon") != ddon_checkpoint.segment_digest("ddon"):
            raise CheckpointError("恢复用的阶段二检查点与给定 DDON 参数不一致")
        resume.load_into(model, prefix="ilgfn")
        resume.restore_optimizer(optimizer, model)
        start = resume.steps.get("stage2", 0)
    frozen_digest = parameter_digest(model.ddon)
    weights = cfg.loss
    total_steps = cfg.train.stage2_steps
    logger.info("stage2 start from=[{}] to=[{}] ddon_digest=[{}]", start, total_steps, frozen_digest[:12])

    model.ddon.eval()
    model.ilgfn.train()
    rows: list[dict[str, float]] = []
    log_path = Path(log_path) if log_path is not None else None
    try:
        for step in range(start, total_steps):
            batch = dataset.batch(step, cfg.train.batch_size)
            with torch.no_grad():
                f_ir, f_vi = model.ddon(batch["ir_de"], batch["vi_de"])
            fused = model.ilgfn.reconstruct(model.ilgfn(f_vi, f_ir))
            total, terms = loss_fu(fused, batch["ir_ref"], batch["vi_ref"], weights)
            _check_finite(total, step, 2)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            row = {"step": step, "l_total": float(total.detach())}
            row.update({k: float(v.detach()) for k, v in terms.items()})
            rows.append(row)
            if step % cfg.train.log_every == 0 or step == total_steps - 1:
                logger.info(
                    "stage2 step=[{}] l_total=[{:.6f}] l_int=[{:.6f}] l_text=[{:.6f}]",
                    step, row["l_total"], row["l_int"], row["l_text"],
                )
    finally:
        frame = _flush_log(rows, STAGE2_COLUMNS, log_path, append=resume is not None)

    if parameter_digest(model.ddon) != frozen_digest:
        raise CheckpointError("阶段二训练修改了冻结的 DDON 参数")
    steps = {"stage1": ddon_checkpoint.steps.get("stage1", 0), "stage2": max(total_steps, start)}
    checkpoint = Checkpoint.from_model(model, cfg, stage=2, steps=steps, optimizer=optimizer)
    return StageResult(checkpoint=checkpoint, log=frame)


def load_model(checkpoint: Checkpoint) -> DDFusion:
    """按检查点中的配置快照重建模型并加载参数（推理用）。"""

    if checkpoint.stage != 2:
        logger.warning("loading non-fusion checkpoint stage=[{}]", checkpoint.stage)
    model = DDFusion.from_config(checkpoint.config)
    checkpoint.load_into(model)
    model.eval()
    return model


def read_log(path: str | Path) -> pd.DataFrame:
    """读取训练 CSV 日志。"""

    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"训练日志不存在: {path}")
    return pd.read_csv(path)
