"""
ddfusion.losses
===============

训练目标：

- 阶段一 ``L_do = L_ir + L_vi + L_ds``，其中 ``L_ds = λ1·L_illu + λ2·L_tv + λ3·L_per``；
- 阶段二 ``L_fu = γ1·L_int + γ2·L_text``；

以及用中心差分校验解析梯度的 ``gradcheck`` 工具。所有损失作用于 ``(B, C, H, W)`` 张量。
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from .errors import InvalidInputError, NumericError
from .models import LossWeights

POOL_SIZE = 16
SOBEL_EPS = 1e-12

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


def _same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise InvalidInputError(f"损失输入形状不一致: {sorted(shapes)}")


def charbonnier_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """逐像素 ``sqrt((pred - target)^2 + eps)`` 的均值，下界为 ``sqrt(eps)``。"""

    _same_shape(pred, target)
    return torch.sqrt((pred - target) ** 2 + eps).mean()


def _pad_to_multiple(x: torch.Tensor, size: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    pad_h, pad_w = (-h) % size, (-w) % size
    if not (pad_h or pad_w):
        return x
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode)


def illumination_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """
    16×16 平均池化后的 Charbonnier 距离，等价于对池化单元取均值。

    尺寸不是 16 的整数倍时先反射填充。
    """

    _same_shape(pred, target)
    pooled_pred = F.avg_pool2d(_pad_to_multiple(pred, POOL_SIZE), POOL_SIZE)
    pooled_target = F.avg_pool2d(_pad_to_multiple(target, POOL_SIZE), POOL_SIZE)
    return charbonnier_loss(pooled_pred, pooled_target, eps)


def tv_loss(x: torch.Tensor) -> torch.Tensor:
    """
    平方前向差分的全变分，按 ``H*W`` 归一化，并在批与通道上取均值。

    :param x: ``(B, C, H, W)`` 张量。
    :type x: torch.Tensor
    :returns: 标量。
    :rtype: torch.Tensor
    """

    b, c, h, w = x.shape
    dh = (x[..., 1:, :] - x[..., :-1, :]) ** 2
    dw = (x[..., :, 1:] - x[..., :, :-1]) ** 2
    return (dh.sum() + dw.sum()) / (b * c * h * w)


class PerceptualExtractor(nn.Module):
    """
    固定随机种子的四级卷积特征金字塔（3×3 卷积，后三级步长 2，LeakyReLU），权重不参与训练。

    权重以 buffer 形式保存，前向时转换到输入的 dtype 与设备。

    :param seed: 权重随机种子。
    :type seed: int
    :param widths: 各级输出通道数。
    :type widths: tuple[int, ...]
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (8, 16, 32, 32), slope: float = 0.2) -> None:
        super().__init__()
        self.seed = seed
        self.slope = slope
        generator = torch.Generator().manual_seed(seed)
        in_channels = 1
        for index, width in enumerate(widths):
            fan_in = in_channels * 9
            weight = torch.randn(width, in_channels, 3, 3, generator=generator) * (2.0 / fan_in) ** 0.5
            self.register_buffer(f"weight{index}", weight)
            in_channels = width
        self.stages = len(widths)

    def _preactivations(self, x: torch.Tensor):
        for index in range(self.stages):
            weight = getattr(self, f"weight{index}").to(device=x.device, dtype=x.dtype)
            x = F.pad(x, (1, 1, 1, 1), mode="reflect" if min(x.shape[-2:]) > 1 else "replicate")
            z = F.conv2d(x, weight, stride=1 if index == 0 else 2)
            x = F.leaky_relu(z, self.slope)
            yield z, x

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [out for _, out in self._preactivations(x)]

    @torch.no_grad()
    def pattern(self, x: torch.Tensor) -> torch.Tensor:
        """所有 LeakyReLU 输入的符号，拼成一维布尔张量。"""

        return torch.cat([(z > 0).reshape(-1) for z, _ in self._preactivations(x)])


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, extractor: PerceptualExtractor) -> torch.Tensor:
    """各级特征均方差之和。"""

    _same_shape(pred, target)
    total = pred.new_zeros(())
    for fa, fb in zip(extractor(pred), extractor(target)):
        total = total + ((fa - fb) ** 2).mean()
    return total


def intensity_loss(fused: torch.Tensor, ir_ref: torch.Tensor, vi_ref: torch.Tensor) -> torch.Tensor:
    """``mean|fused - ir_ref| + mean|fused - vi_ref|``。"""

    _same_shape(fused, ir_ref, vi_ref)
    return (fused - ir_ref).abs().mean() + (fused - vi_ref).abs().mean()


def sobel_magnitude(x: torch.Tensor) -> torch.Tensor:
    """
    逐通道 Sobel 梯度幅值 ``sqrt(Gx^2 + Gy^2 + 1e-12)``，反射填充。
    """

    c = x.shape[1]
    kx = _SOBEL_X.to(device=x.device, dtype=x.dtype).expand(c, 1, 3, 3)
    ky = _SOBEL_Y.to(device=x.device, dtype=x.dtype).expand(c, 1, 3, 3)
    padded = F.pad(x, (1, 1, 1, 1), mode="reflect")
    gx = F.conv2d(padded, kx, groups=c)
    gy = F.conv2d(padded, ky, groups=c)
    return torch.sqrt(gx**2 + gy**2 + SOBEL_EPS)


def texture_loss(fused: torch.Tensor, ir_ref: torch.Tensor, vi_ref: torch.Tensor) -> torch.Tensor:
    """融合图梯度幅值与两路参考梯度幅值逐元素最大值之差的 L1 均值。"""

    _same_shape(fused, ir_ref, vi_ref)
    target = torch.maximum(sobel_magnitude(ir_ref), sobel_magnitude(vi_ref))
    return (sobel_magnitude(fused) - target).abs().mean()


def loss_do(
    ir_en: torch.Tensor,
    vi_en: torch.Tensor,
    ir_ref: torch.Tensor,
    vi_ref: torch.Tensor,
    weights: LossWeights,
    extractor: PerceptualExtractor,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """
    阶段一退化优化损失。

    :param ir_en: 增强红外图。
    :type ir_en: torch.Tensor
    :param vi_en: 增强可见光 Y 通道。
    :type vi_en: torch.Tensor
    :param ir_ref: 干净红外参考。
    :type ir_ref: torch.Tensor
    :param vi_ref: 可见光参考（参考增强结果的 Y 通道）。
    :type vi_ref: torch.Tensor
    :param weights: 损失权重与开关。
    :type weights: LossWeights
    :param extractor: 感知特征提取器。
    :type extractor: PerceptualExtractor
    :returns: ``(总损失, 分项)``，分项键为 ``l_ir`` / ``l_vi`` / ``l_illu`` / ``l_tv`` / ``l_per``，
        关闭的项为 0。
    :rtype: tuple[torch.Tensor, dict[str, torch.Tensor]]
    """

    _same_shape(ir_en, vi_en, ir_ref, vi_ref)
    eps = weights.epsilon
    zero = ir_en.new_zeros(())
    terms = {
        "l_ir": charbonnier_loss(ir_en, ir_ref, eps),
        "l_vi": charbonnier_loss(vi_en, vi_ref, eps),
        "l_illu": zero,
        "l_tv": zero,
        "l_per": zero,
    }
    if weights.use_ds:
        terms["l_illu"] = illumination_loss(vi_en, vi_ref, eps)
        terms["l_tv"] = tv_loss(vi_en)
        if weights.tv_on_infrared:
            terms["l_tv"] = terms["l_tv"] + tv_loss(ir_en)
        terms["l_per"] = perceptual_loss(ir_en, ir_ref, extractor)
    total = (
        terms["l_ir"]
        + terms["l_vi"]
        + weights.lambda1 * terms["l_illu"]
        + weights.lambda2 * terms["l_tv"]
        + weights.lambda3 * terms["l_per"]
    )
    return total, terms


def loss_fu(
    fused: torch.Tensor,
    ir_ref: torch.Tensor,
    vi_ref: torch.Tensor,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """
    阶段二融合损失 ``γ1·L_int + γ2·L_text``，``use_text`` 关闭时纹理项为 0。

    :returns: ``(总损失, {"l_int": ..., "l_text": ...})``。
    :rtype: tuple[torch.Tensor, dict[str, torch.Tensor]]
    """

    terms = {
        "l_int": intensity_loss(fused, ir_ref, vi_ref),
        "l_text": texture_loss(fused, ir_ref, vi_ref) if weights.use_text else fused.new_zeros(()),
    }
    total = weights.gamma1 * terms["l_int"] + weights.gamma2 * terms["l_text"]
    return total, terms


def random_point(
    shape: tuple[int, ...],
    seed: int,
    low: float = 0.0,
    high: float = 1.0,
    accept: Callable[[torch.Tensor], bool] | None = None,
    max_tries: int = 100,
) -> torch.Tensor:
    """
    生成双精度均匀随机点；给出 ``accept`` 时拒绝不满足条件的样本并重采。

    :raises NumericError: 连续 ``max_tries`` 次都被拒绝时。
    """

    generator = torch.Generator().manual_seed(seed)
    for _ in range(max_tries):
        point = torch.rand(shape, generator=generator, dtype=torch.float64) * (high - low) + low
        if accept is None or accept(point):
            return point
    raise NumericError(f"连续 {max_tries} 次未采到可用的点")


def leaky_pattern(module: nn.Module, run: Callable[[], object]) -> torch.Tensor:
    """
    执行 ``run`` 并记录模块内每个 ``nn.LeakyReLU`` 输入的符号，拼成一维布尔张量。

    两次调用的符号一致说明两点之间没有越过折点。
    """

    signs: list[torch.Tensor] = []

    def hook(_module, inputs, _output):
        signs.append((inputs[0].detach() > 0).reshape(-1))

    handles = [m.register_forward_hook(hook) for m in module.modules() if isinstance(m, nn.LeakyReLU)]
    try:
        with torch.no_grad():
            run()
    finally:
        for handle in handles:
            handle.remove()
    return torch.cat(signs) if signs else torch.zeros(0, dtype=torch.bool)


def gradcheck(
    f: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    step: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    signature: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> float:
    """
    用中心差分校验标量函数的解析梯度。

    给出 ``signature`` 时（返回分段线性环节的符号模式），
    ``x ± h·e_i`` 与 ``x`` 模式不同的坐标跨越了折点，不参与比较。

    :param f: 输入张量到标量张量的函数。
    :type f: Callable[[torch.Tensor], torch.Tensor]
    :param point: 校验点，建议使用双精度。
    :type point: torch.Tensor
    :param step: 差分步长 h。
    :type step: float
    :param max_coords: 最多抽查的坐标个数，``None`` 表示全部。
    :type max_coords: int | None
    :param seed: 坐标抽样种子。
    :type seed: int
    :param floor: 相对误差分母下限。
    :type floor: float
    :param signature: 折点符号模式函数。
    :type signature: Callable[[torch.Tensor], torch.Tensor] | None
    :returns: 参与比较的坐标上 ``|a - n| / max(|a|, |n|, floor)`` 的最大值。
    :rtype: float
    :raises NumericError: 函数值非有限，或全部抽查坐标都跨越折点时。
    """

    if step <= 0:
        raise InvalidInputError(f"差分步长必须为正: {step}")
    x = point.detach().clone().requires_grad_(True)
    value = f(x)
    if not torch.isfinite(value).all():
        raise NumericError("gradcheck 的函数值非有限")
    (analytic,) = torch.autograd.grad(value, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)
    base = point.detach().reshape(-1)
    n = base.numel()
    if max_coords is None or max_coords >= n:
        coords = np.arange(n)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(n, size=max_coords, replace=False))
    reference = signature(point.detach()) if signature is not None else None
    worst = 0.0
    compared = 0
    with torch.no_grad():
        for i in coords:
            plus = base.clone()
            minus = base.clone()
            plus[i] += step
            minus[i] -= step
            plus, minus = plus.reshape(point.shape), minus.reshape(point.shape)
            if reference is not None and not (
                torch.equal(signature(plus), reference) and torch.equal(signature(minus), reference)
            ):
                continue
            f_plus = f(plus)
            f_minus = f(minus)
            if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                raise NumericError(f"gradcheck 在坐标 {int(i)} 处函数值非有限")
            numeric = float((f_plus - f_minus) / (2 * step))
            a = float(analytic[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            compared += 1
    if compared == 0:
        raise NumericError("gradcheck 的全部抽查坐标都跨越折点")
    return worst


def module_gradcheck(
    module: nn.Module,
    objective: Callable[[Callable[..., torch.Tensor]], torch.Tensor],
    step: float = 1e-4,
    max_coords: int | None = 64,
    seed: int = 0,
) -> float:
    """
    对模块全部可训练参数做梯度校验，模块内 LeakyReLU 的折点由前向钩子识别。

    ``objective`` 接收一个与 ``module(...)`` 同签名的调用对象并返回标量，
    参数通过 ``torch.func.functional_call`` 注入。

    :param module: 待校验模块，建议先 ``.double()``。
    :type module: torch.nn.Module
    :param objective: 目标函数构造器。
    :type objective: Callable
    :returns: 最大相对误差。
    :rtype: float
    """

    named = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    names = [name for name, _ in named]
    shapes = [p.shape for _, p in named]
    sizes = [p.numel() for _, p in named]
    flat = torch.cat([p.detach().reshape(-1) for _, p in named])

    def unflatten(vec: torch.Tensor) -> Mapping[str, torch.Tensor]:
        chunks = torch.split(vec, sizes)
        return {name: chunk.reshape(shape) for name, chunk, shape in zip(names, chunks, shapes)}

    def f(vec: torch.Tensor) -> torch.Tensor:
        params = unflatten(vec)
        return objective(lambda *args, **kwargs: functional_call(module, params, args, kwargs))

    def signature(vec: torch.Tensor) -> torch.Tensor:
        return leaky_pattern(module, lambda: f(vec))

    return gradcheck(f, flat, step=step, max_coords=max_coords, seed=seed, signature=signature)
