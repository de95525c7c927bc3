"""
ddfusion.gradchecks
===================

梯度校验套件：每个损失与每个可训练模块在双精度小探针上与中心差分比较。

分段线性环节（LeakyReLU、L1、逐元素最大值）在折点处不可导，
差分模板跨越折点的坐标按符号模式识别后跳过；
Charbonnier 项的参考点与校验点保持至少 ``REFERENCE_GAP`` 的距离，避开 ``sqrt(ε)`` 量级的高曲率区。
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from loguru import logger
from torch import nn

from .blocks import CBAM, LIA, MSConv, RDSCB, GNLeakyReLU, InteractiveTransformerBlock, SwinBlock
from .errors import InvalidInputError, NumericError
from .ilgfn import ReconstructionHead
from .losses import (
    PerceptualExtractor,
    charbonnier_loss,
    gradcheck,
    illumination_loss,
    intensity_loss,
    loss_do,
    loss_fu,
    module_gradcheck,
    perceptual_loss,
    sobel_magnitude,
    texture_loss,
    tv_loss,
)
from .models import LossWeights

TOLERANCE = 1e-4
STEP = 1e-4
MAX_TRIES = 10
REFERENCE_GAP = (0.01, 0.2)

PROBE_CHANNELS = 4
PROBE_SIZE = 8
LOSS_SIZE = 16


@dataclass(frozen=True, slots=True)
class CheckResult:
    name: str
    error: float
    tries: int

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _rand(shape: tuple[int, ...], generator: torch.Generator, low: float = 0.05, high: float = 0.95) -> torch.Tensor:
    return torch.rand(shape, generator=generator, dtype=torch.float64) * (high - low) + low


def _shifted(x: torch.Tensor, generator: torch.Generator, signed: bool) -> torch.Tensor:
    gap = _rand(tuple(x.shape), generator, *REFERENCE_GAP)
    if signed:
        gap = torch.where(torch.rand(x.shape, generator=generator, dtype=torch.float64) < 0.5, -gap, gap)
    return x + gap


def _weighted_sum(outputs: torch.Tensor | tuple[torch.Tensor, ...], weights: list[torch.Tensor]) -> torch.Tensor:
    if isinstance(outputs, torch.Tensor):
        outputs = (outputs,)
    return sum((out * w).sum() for out, w in zip(outputs, weights))


def _block_factories() -> dict[str, Callable[[], tuple[nn.Module, int]]]:
    c = PROBE_CHANNELS
    return {
        "itb": lambda: (InteractiveTransformerBlock(c, PROBE_SIZE, 2, 2.0), 2),
        "swin": lambda: (SwinBlock(c, PROBE_SIZE // 2, 2, 2.0), 1),
        "msconv": lambda: (MSConv(c, (1, 3, 5, 7)), 1),
        "cbam": lambda: (CBAM(c, 8), 1),
        "rdscb": lambda: (RDSCB(c, 3, 2, groups=2), 1),
        "lia": lambda: (LIA(c, 3), 2),
        "gn_lr": lambda: (GNLeakyReLU(c, groups=2), 1),
        "recon_head": lambda: (ReconstructionHead(c), 1),
    }


BLOCK_CHECKS = tuple(_block_factories())


def check_block(name: str, seed: int = 0) -> CheckResult:
    """
    对单个模块的全部参数做梯度校验，探针为 ``1×4×8×8`` 双精度输入。

    :param name: 模块名，取值见 ``BLOCK_CHECKS``。
    :type name: str
    :param seed: 起始种子。
    :type seed: int
    :returns: 校验结果。
    :rtype: CheckResult
    :raises InvalidInputError: 模块名未知时。
    :raises NumericError: 多次重采后抽查坐标仍全部跨越折点时。
    """

    factories = _block_factories()
    if name not in factories:
        raise InvalidInputError(f"未知的模块校验: {name}，可选 {', '.join(factories)}")
    for attempt in range(MAX_TRIES):
        torch.manual_seed(seed + attempt)
        generator = torch.Generator().manual_seed(seed + attempt)
        module, arity = factories[name]()
        module = module.double()
        shape = (1, PROBE_CHANNELS, PROBE_SIZE, PROBE_SIZE)
        inputs = [torch.randn(shape, generator=generator, dtype=torch.float64) for _ in range(arity)]
        with torch.no_grad():
            probe = module(*inputs)
        probe = probe if isinstance(probe, tuple) else (probe,)
        weights = [torch.randn(p.shape, generator=generator, dtype=torch.float64) for p in probe]
        try:
            error = module_gradcheck(
                module,
                lambda call: _weighted_sum(call(*inputs), weights),
                step=STEP,
                max_coords=48,
                seed=seed,
            )
        except NumericError:
            continue
        return CheckResult(name=name, error=error, tries=attempt + 1)
    raise NumericError(f"{name} 在 {MAX_TRIES} 次采样内未找到可比较的坐标")


def _loss_case(name: str, generator: torch.Generator, extractor: PerceptualExtractor):
    """返回 ``(f, point, signature)``：待校验函数、校验点与折点符号模式（无折点时为 ``None``）。"""

    shape = (1, 1, LOSS_SIZE, LOSS_SIZE)
    x = _rand(shape, generator)
    ref_a = _rand(shape, generator)
    ref_b = _rand(shape, generator)
    weights = LossWeights()
    target = torch.maximum(sobel_magnitude(ref_a), sobel_magnitude(ref_b))

    def intensity_signs(p: torch.Tensor) -> torch.Tensor:
        return torch.cat([(p > ref_a).reshape(-1), (p > ref_b).reshape(-1)])

    def texture_signs(p: torch.Tensor) -> torch.Tensor:
        return (sobel_magnitude(p) > target).reshape(-1)

    if name == "charbonnier":
        ref = _shifted(x, generator, signed=True)
        return (lambda p: charbonnier_loss(p, ref)), x, None
    if name == "illumination":
        ref = _shifted(x, generator, signed=False)
        return (lambda p: illumination_loss(p, ref)), x, None
    if name == "tv":
        return tv_loss, x, None
    if name == "perceptual":
        return (lambda p: perceptual_loss(p, ref_a, extractor)), x, extractor.pattern
    if name == "intensity":
        return (lambda p: intensity_loss(p, ref_a, ref_b)), x, intensity_signs
    if name == "texture":
        return (lambda p: texture_loss(p, ref_a, ref_b)), x, texture_signs
    if name == "loss_do":
        vi = _rand(shape, generator)
        ir_ref = _shifted(x, generator, signed=True)
        vi_ref = _shifted(vi, generator, signed=False)
        point = torch.cat([x, vi], dim=1)

        def f(p: torch.Tensor) -> torch.Tensor:
            return loss_do(p[:, :1], p[:, 1:], ir_ref, vi_ref, weights, extractor)[0]

        return f, point, lambda p: extractor.pattern(p[:, :1])
    if name == "loss_fu":

        def signs(p: torch.Tensor) -> torch.Tensor:
            return torch.cat([intensity_signs(p), texture_signs(p)])

        return (lambda p: loss_fu(p, ref_a, ref_b, weights)[0]), x, signs
    raise InvalidInputError(f"未知的损失校验: {name}，可选 {', '.join(LOSS_CHECKS)}")


LOSS_CHECKS = (
    "charbonnier",
    "illumination",
    "tv",
    "perceptual",
    "intensity",
    "texture",
    "loss_do",
    "loss_fu",
)


def check_loss(name: str, seed: int = 0) -> CheckResult:
    """
    在随机内点上校验损失对其第一个图像参数的梯度。

    :param name: 损失名，取值见 ``LOSS_CHECKS``。
    :type name: str
    :param seed: 起始种子。
    :type seed: int
    :returns: 校验结果。
    :rtype: CheckResult
    :raises InvalidInputError: 损失名未知时。
    """

    if name not in LOSS_CHECKS:
        raise InvalidInputError(f"未知的损失校验: {name}，可选 {', '.join(LOSS_CHECKS)}")
    extractor = PerceptualExtractor(seed=0)
    for attempt in range(MAX_TRIES):
        generator = torch.Generator().manual_seed(seed + attempt)
        f, point, signature = _loss_case(name, generator, extractor)
        try:
            error = gradcheck(f, point, step=STEP, max_coords=64, seed=seed, signature=signature)
        except NumericError:
            continue
        return CheckResult(name=name, error=error, tries=attempt + 1)
    raise NumericError(f"{name} 在 {MAX_TRIES} 次采样内未找到可比较的坐标")


def run_suite(losses: tuple[str, ...] = LOSS_CHECKS, blocks: tuple[str, ...] = BLOCK_CHECKS, seed: int = 0) -> list[CheckResult]:
    """依次运行给定的损失与模块校验。"""

    results = [check_loss(name, seed) for name in losses]
    results += [check_block(name, seed) for name in blocks]
    for result in results:
        logger.info(
            "gradcheck name=[{}] error=[{:.3e}] passed=[{}] tries=[{}]",
            result.name, result.error, result.passed, result.tries,
        )
    return results
