"""
ddfusion.ddon
=============

退化解耦优化网络（DDON）。

红外图在原始图像域做 DCT 频带分解、可见光图做 Retinex 分解，四个分量各自嵌入为 C 通道特征，
沿各自的增强路径处理后按 ``GN&LR(path(F) + CBAM(F))`` 汇合：

- 低频（条纹噪声所在）：Swin 块；
- 高频（高斯噪声所在）：多尺度卷积；
- 反射/照度：ITB 交互。

红外增强特征为两个频带之和（逆 DCT 的线性性），可见光增强特征为反射与照度的逐元素乘积。
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .blocks import CBAM, GNLeakyReLU, InteractiveTransformerBlock, MSConv, SwinBlock
from .decomposition import DEFAULT_RETINEX_SIGMA, DEFAULT_TAU, frequency_decompose, retinex_decompose
from .errors import InvalidInputError
from .models import BlockConfig

COMPONENTS = ("low", "high", "r", "l")


def check_pair(ir: torch.Tensor, vi: torch.Tensor) -> None:
    """两路输入必须都是 ``(B, 1, H, W)`` 且尺寸一致。"""

    for name, x in (("ir", ir), ("vi", vi)):
        if x.dim() != 4 or x.shape[1] != 1:
            raise InvalidInputError(f"{name} 需为 (B, 1, H, W)，实际为 {tuple(x.shape)}")
    if ir.shape != vi.shape:
        raise InvalidInputError(f"红外与可见光尺寸不一致: {tuple(ir.shape)} vs {tuple(vi.shape)}")


def _embed(channels: int) -> nn.Conv2d:
    return nn.Conv2d(1, channels, 3, padding=1, padding_mode="reflect")


class ImageHead(nn.Module):
    """3×3 卷积到单通道后 sigmoid，输出落在 [0, 1]。"""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 3, padding=1, padding_mode="reflect")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(x))


class DDON(nn.Module):
    """
    :param cfg: 模块结构超参数。
    :type cfg: BlockConfig
    :param tau: DCT 低频截止阈值。
    :type tau: float
    :param retinex_sigma: Retinex 照度估计的模糊尺度。
    :type retinex_sigma: float
    """

    def __init__(
        self,
        cfg: BlockConfig | None = None,
        tau: float = DEFAULT_TAU,
        retinex_sigma: float = DEFAULT_RETINEX_SIGMA,
    ) -> None:
        super().__init__()
        cfg = cfg or BlockConfig()
        c = cfg.channels
        self.tau = tau
        self.retinex_sigma = retinex_sigma
        self.embeds = nn.ModuleDict({name: _embed(c) for name in COMPONENTS})
        self.paths = nn.ModuleDict(
            {
                "low": SwinBlock(c, cfg.window_size, cfg.heads, cfg.mlp_ratio),
                "high": MSConv(c, cfg.msconv_kernels, cfg.leaky_slope),
            }
        )
        self.interact = InteractiveTransformerBlock(c, cfg.window_size, cfg.heads, cfg.mlp_ratio)
        self.cbam = nn.ModuleDict(
            {name: CBAM(c, cfg.cbam_reduction, cfg.leaky_slope) for name in COMPONENTS}
        )
        self.norms = nn.ModuleDict(
            {name: GNLeakyReLU(c, cfg.gn_groups, cfg.leaky_slope) for name in COMPONENTS}
        )
        self.heads = nn.ModuleDict({"ir": ImageHead(c), "vi": ImageHead(c)})

    @torch.no_grad()
    def decompose(self, ir: torch.Tensor, vi: torch.Tensor) -> dict[str, torch.Tensor]:
        """
        在图像域分解两路输入，返回四个 ``(B, 1, H, W)`` 分量。

        分解不可学习，逐样本在 numpy 中完成。
        """

        check_pair(ir, vi)
        ir_np = ir.detach().cpu().double().numpy()
        vi_np = vi.detach().cpu().double().numpy()
        low, high, refl, illu = [], [], [], []
        for ir_plane, vi_plane in zip(ir_np, vi_np):
            lo, hi = frequency_decompose(ir_plane, self.tau)
            pair = retinex_decompose(vi_plane, self.retinex_sigma)
            low.append(lo)
            high.append(hi)
            refl.append(pair.reflectance)
            illu.append(pair.illumination)

        def back(planes: list[np.ndarray]) -> torch.Tensor:
            return torch.from_numpy(np.stack(planes)).to(device=ir.device, dtype=ir.dtype)

        return {"low": back(low), "high": back(high), "r": back(refl), "l": back(illu)}

    def embed(self, components: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        return {name: self.embeds[name](components[name]) for name in COMPONENTS}

    def enhance(self, embedded: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """
        各分量沿自身路径增强，再按 ``GN&LR(path(F) + CBAM(F))`` 汇合。
        """

        refined = {
            "low": self.paths["low"](embedded["low"]),
            "high": self.paths["high"](embedded["high"]),
        }
        refined["r"], refined["l"] = self.interact(embedded["r"], embedded["l"])
        return {
            name: self.norms[name](refined[name] + self.cbam[name](embedded[name]))
            for name in COMPONENTS
        }

    @staticmethod
    def recompose(enhanced: dict[str, torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """红外：两个频带相加；可见光：反射与照度逐元素相乘。"""

        f_ir = enhanced["low"] + enhanced["high"]
        f_vi = enhanced["r"] * enhanced["l"]
        return f_ir, f_vi

    def forward(self, ir: torch.Tensor, vi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        :param ir: ``(B, 1, H, W)`` 退化红外图。
        :type ir: torch.Tensor
        :param vi: ``(B, 1, H, W)`` 退化可见光 Y 通道。
        :type vi: torch.Tensor
        :returns: ``(F_ir_en, F_vi_en)``，均为 ``(B, C, H, W)``。
        :rtype: tuple[torch.Tensor, torch.Tensor]
        """

        components = self.decompose(ir, vi)
        return self.recompose(self.enhance(self.embed(components)))

    def reconstruct(self, f_ir: torch.Tensor, f_vi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """阶段一的图像头，输出 ``(I_ir_en, I_vi_en)``。"""

        return self.heads["ir"](f_ir), self.heads["vi"](f_vi)


class BypassEncoder(nn.Module):
    """
    去掉 DDON 的消融替身：原图直接 3×3 嵌入，不做分解与增强，图像头与 DDON 相同。
    """

    def __init__(self, cfg: BlockConfig | None = None) -> None:
        super().__init__()
        cfg = cfg or BlockConfig()
        self.embeds = nn.ModuleDict({"ir": _embed(cfg.channels), "vi": _embed(cfg.channels)})
        self.heads = nn.ModuleDict({"ir": ImageHead(cfg.channels), "vi": ImageHead(cfg.channels)})

    def forward(self, ir: torch.Tensor, vi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        check_pair(ir, vi)
        return self.embeds["ir"](ir), self.embeds["vi"](vi)

    def reconstruct(self, f_ir: torch.Tensor, f_vi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.heads["ir"](f_ir), self.heads["vi"](f_vi)
