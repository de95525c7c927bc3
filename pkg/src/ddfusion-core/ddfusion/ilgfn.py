"""
ddfusion.ilgfn
==============

交互式局部-全局融合网络（ILGFN）、重建头以及整图融合流程。

局部路径对每个核尺寸 n 执行 ``RDSCB_fu(LIA(RDSCB_vi(F_vi), RDSCB_ir(F_ir)))``，
三条路径拼接后 1×1 卷积；全局路径为两路增强特征上的 ITB；
LGA 对三路拼接结果做 1×1 卷积、两个 Swin 块与 3×3 卷积。
"""

from __future__ import annotations

import numpy as np
import torch
from loguru import logger
from torch import nn

from .blocks import LIA, RDSCB, InteractiveTransformerBlock, SwinBlock
from .ddon import DDON, BypassEncoder
from .errors import InvalidInputError
from .imaging import YCbCrImage, check_image, luminance, rgb_to_ycbcr, ycbcr_to_rgb
from .models import BlockConfig, ProjectConfig


def _check_features(f_vi: torch.Tensor, f_ir: torch.Tensor) -> None:
    if f_vi.shape != f_ir.shape:
        raise InvalidInputError(f"融合输入形状不一致: {tuple(f_vi.shape)} vs {tuple(f_ir.shape)}")


class LocalPath(nn.Module):
    """单个核尺寸 n 的局部融合路径。"""

    def __init__(self, cfg: BlockConfig, kernel: int) -> None:
        super().__init__()
        c = cfg.channels
        self.kernel = kernel
        self.rdscb_vi = RDSCB(c, kernel, cfg.rdscb_repeat, cfg.gn_groups, cfg.leaky_slope)
        self.rdscb_ir = RDSCB(c, kernel, cfg.rdscb_repeat, cfg.gn_groups, cfg.leaky_slope)
        self.lia = LIA(c, kernel, cfg.leaky_slope)
        self.rdscb_fu = RDSCB(c, kernel, cfg.rdscb_repeat, cfg.gn_groups, cfg.leaky_slope)

    def forward(self, f_vi: torch.Tensor, f_ir: torch.Tensor) -> torch.Tensor:
        return self.rdscb_fu(self.lia(self.rdscb_vi(f_vi), self.rdscb_ir(f_ir)))


class LGA(nn.Module):
    def __init__(self, cfg: BlockConfig, streams: int = 3) -> None:
        super().__init__()
        c = cfg.channels
        self.reduce = nn.Conv2d(streams * c, c, 1)
        self.swin = nn.Sequential(
            SwinBlock(c, cfg.window_size, cfg.heads, cfg.mlp_ratio),
            SwinBlock(c, cfg.window_size, cfg.heads, cfg.mlp_ratio),
        )
        self.out = nn.Conv2d(c, c, 3, padding=1, padding_mode="reflect")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.swin(self.reduce(x)))


class ReconstructionHead(nn.Module):
    """三个 3×3 卷积（C → C → C/2 → 1），中间 LeakyReLU，末尾 sigmoid。"""

    def __init__(self, channels: int, slope: float = 0.2) -> None:
        super().__init__()
        half = max(1, channels // 2)
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.LeakyReLU(slope),
            nn.Conv2d(channels, half, 3, padding=1, padding_mode="reflect"),
            nn.LeakyReLU(slope),
            nn.Conv2d(half, 1, 3, padding=1, padding_mode="reflect"),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.body(x))


class ILGFN(nn.Module):
    """
    :param cfg: 模块结构超参数，``local_kernels`` 决定局部路径条数。
    :type cfg: BlockConfig
    """

    def __init__(self, cfg: BlockConfig | None = None) -> None:
        super().__init__()
        cfg = cfg or BlockConfig()
        c = cfg.channels
        self.local_paths = nn.ModuleList(LocalPath(cfg, n) for n in cfg.local_kernels)
        self.local_fuse = nn.Conv2d(len(cfg.local_kernels) * c, c, 1)
        self.global_itb = InteractiveTransformerBlock(c, cfg.window_size, cfg.heads, cfg.mlp_ratio)
        self.lga = LGA(cfg)
        self.head = ReconstructionHead(c, cfg.leaky_slope)

    def local(self, f_vi: torch.Tensor, f_ir: torch.Tensor) -> torch.Tensor:
        return self.local_fuse(torch.cat([path(f_vi, f_ir) for path in self.local_paths], dim=1))

    def forward(self, f_vi: torch.Tensor, f_ir: torch.Tensor) -> torch.Tensor:
        """
        :param f_vi: ``(B, C, H, W)`` 可见光增强特征。
        :param f_ir: ``(B, C, H, W)`` 红外增强特征。
        :returns: ``(B, C, H, W)`` 融合特征。
        :raises InvalidInputError: 两路形状不一致时。
        """

        _check_features(f_vi, f_ir)
        f_local = self.local(f_vi, f_ir)
        g_vi, g_ir = self.global_itb(f_vi, f_ir)
        return self.lga(torch.cat([f_local, g_vi, g_ir], dim=1))

    def reconstruct(self, f_fu: torch.Tensor) -> torch.Tensor:
        return self.head(f_fu)


class ConcatFusion(nn.Module):
    """去掉 ILGFN 的消融替身：拼接后 1×1 卷积，重建头与 ILGFN 相同。"""

    def __init__(self, cfg: BlockConfig | None = None) -> None:
        super().__init__()
        cfg = cfg or BlockConfig()
        self.fuse = nn.Conv2d(2 * cfg.channels, cfg.channels, 1)
        self.head = ReconstructionHead(cfg.channels, cfg.leaky_slope)

    def forward(self, f_vi: torch.Tensor, f_ir: torch.Tensor) -> torch.Tensor:
        _check_features(f_vi, f_ir)
        return self.fuse(torch.cat([f_vi, f_ir], dim=1))

    def reconstruct(self, f_fu: torch.Tensor) -> torch.Tensor:
        return self.head(f_fu)


class DDFusion(nn.Module):
    """
    完整模型：``ddon`` 负责退化解耦增强，``ilgfn`` 负责融合与重建。

    两个子网络的参数互不重叠，检查点分别存为 ``ddon.*`` 与 ``ilgfn.*`` 段。
    """

    def __init__(self, ddon: nn.Module, ilgfn: nn.Module) -> None:
        super().__init__()
        self.ddon = ddon
        self.ilgfn = ilgfn

    @classmethod
    def from_config(cls, cfg: ProjectConfig) -> "DDFusion":
        """按配置（含消融开关）构建模型。"""

        blocks = cfg.blocks
        ablation = cfg.train.ablation
        if ablation == "no_ddon":
            ddon: nn.Module = BypassEncoder(blocks)
        else:
            ddon = DDON(blocks, tau=cfg.train.tau, retinex_sigma=cfg.train.retinex_sigma)
        ilgfn: nn.Module = ConcatFusion(blocks) if ablation == "no_ilgfn" else ILGFN(blocks)
        logger.debug(
            "model built ablation=[{}] ddon=[{}] ilgfn=[{}]",
            ablation,
            type(ddon).__name__,
            type(ilgfn).__name__,
        )
        return cls(ddon, ilgfn)

    def enhance(self, ir: torch.Tensor, vi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """阶段一前向：返回增强后的 ``(I_ir_en, I_vi_en)`` 图像。"""

        return self.ddon.reconstruct(*self.ddon(ir, vi))

    def forward(self, ir: torch.Tensor, vi: torch.Tensor) -> torch.Tensor:
        """阶段二前向：返回融合后的 Y 通道 ``(B, 1, H, W)``。"""

        f_ir, f_vi = self.ddon(ir, vi)
        return self.ilgfn.reconstruct(self.ilgfn(f_vi, f_ir))


def fuse_image(model: DDFusion, ir: np.ndarray, vi: np.ndarray) -> np.ndarray:
    """
    融合一对退化图像。

    可见光为 RGB 时取 Y 通道作为输入，用融合结果替换 Y 后与原 Cb/Cr 一起转回 RGB；
    可见光为灰度时直接输出单通道结果。红外为 RGB 时取其亮度。

    :param model: 已加载参数的模型。
    :type model: DDFusion
    :param ir: ``(1 或 3, H, W)`` 退化红外图。
    :type ir: numpy.ndarray
    :param vi: ``(1 或 3, H, W)`` 退化可见光图。
    :type vi: numpy.ndarray
    :returns: 与可见光通道数一致的融合图，取值 [0, 1]。
    :rtype: numpy.ndarray
    :raises InvalidInputError: 两路空间尺寸不一致时。
    """

    ir = luminance(check_image(ir))
    vi = check_image(vi)
    if ir.shape[1:] != vi.shape[1:]:
        raise InvalidInputError(f"红外与可见光尺寸不一致: {ir.shape[1:]} vs {vi.shape[1:]}")
    ycc = rgb_to_ycbcr(vi) if vi.shape[0] == 3 else None
    vi_y = ycc.y if ycc is not None else vi

    param = next(model.parameters())

    def to_tensor(plane: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(plane[None])).to(param.device, param.dtype)

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            fused = model(to_tensor(ir), to_tensor(vi_y))
    finally:
        model.train(was_training)
    fused_y = np.clip(fused[0].double().cpu().numpy(), 0.0, 1.0)
    if ycc is None:
        return fused_y
    return ycbcr_to_rgb(YCbCrImage(y=fused_y, cb=ycc.cb, cr=ycc.cr))
