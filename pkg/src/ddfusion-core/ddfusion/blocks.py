"""
ddfusion.blocks
===============

可复用的网络模块：窗口划分、多头注意力、交互式自注意力（ISA）与交互 Transformer 块（ITB）、
Swin 块、多尺度卷积（MSConv）、CBAM、RDSCB、LIA 以及 GN&LR 收尾层。

特征图统一为 ``(B, C, H, W)``；注意力内部的 token 矩阵为 ``(N, M*M, C)``。
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InvalidInputError, NumericError


def init_linear(module: nn.Module) -> None:
    """线性层截断正态初始化（std 0.02），偏置置零；LayerNorm 恢复为单位仿射。"""

    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def _zero_(module: nn.Module) -> None:
    for param in module.parameters():
        nn.init.zeros_(param)


@dataclass(frozen=True, slots=True)
class WindowSet:
    """
    窗口划分结果及其逆变换所需的布局信息。

    :param windows: ``(B * nW, M*M, C)`` token 矩阵。
    :param batch: 原始批大小。
    :param height: 填充前高度。
    :param width: 填充前宽度。
    :param padded_height: 填充后高度，M 的整数倍。
    :param padded_width: 填充后宽度，M 的整数倍。
    :param window_size: 窗口边长 M。
    """

    windows: torch.Tensor
    batch: int
    height: int
    width: int
    padded_height: int
    padded_width: int
    window_size: int

    @property
    def count(self) -> int:
        return self.windows.shape[0]

    def with_windows(self, windows: torch.Tensor) -> "WindowSet":
        return replace(self, windows=windows)


def window_partition(x: torch.Tensor, window_size: int) -> WindowSet:
    """
    把特征图切成互不重叠的 M×M 窗口并展平为 token。

    尺寸不是 M 的整数倍时在右侧/下侧反射填充（填充量不小于边长时退化为复制填充），
    ``window_reverse`` 负责裁剪回原尺寸。

    :param x: ``(B, C, H, W)`` 特征图。
    :type x: torch.Tensor
    :param window_size: 窗口边长 M。
    :type window_size: int
    :returns: 窗口集合。
    :rtype: WindowSet
    :raises InvalidInputError: ``window_size`` 不为正或输入不是四维张量时。
    """

    if window_size <= 0:
        raise InvalidInputError(f"window_size 必须为正: {window_size}")
    if x.dim() != 4:
        raise InvalidInputError(f"需要 (B, C, H, W) 特征图，实际形状为 {tuple(x.shape)}")
    b, c, h, w = x.shape
    m = window_size
    pad_h = (-h) % m
    pad_w = (-w) % m
    if pad_h or pad_w:
        mode = "reflect" if pad_h < h and pad_w < w else "replicate"
        x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)
    hp, wp = h + pad_h, w + pad_w
    tokens = (
        x.permute(0, 2, 3, 1)
        .reshape(b, hp // m, m, wp // m, m, c)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(-1, m * m, c)
    )
    return WindowSet(tokens, b, h, w, hp, wp, m)


def window_reverse(window_set: WindowSet) -> torch.Tensor:
    """``window_partition`` 的逆变换，裁掉填充部分。"""

    m = window_set.window_size
    b, hp, wp = window_set.batch, window_set.padded_height, window_set.padded_width
    c = window_set.windows.shape[-1]
    x = (
        window_set.windows.reshape(b, hp // m, wp // m, m, m, c)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, hp, wp, c)
        .permute(0, 3, 1, 2)
    )
    return x[:, :, : window_set.height, : window_set.width].contiguous()


def msa(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    proj: nn.Module | None = None,
    return_attn: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """
    多头缩放点积注意力：每个头计算 ``softmax(Q K^T / sqrt(d)) V``，拼接后经输出投影。

    :param q: ``(N, T, C)`` 查询。
    :type q: torch.Tensor
    :param k: ``(N, T, C)`` 键。
    :type k: torch.Tensor
    :param v: ``(N, T, C)`` 值。
    :type v: torch.Tensor
    :param heads: 头数，需整除 C。
    :type heads: int
    :param proj: 输出投影，``None`` 表示不投影。
    :type proj: torch.nn.Module | None
    :param return_attn: 是否同时返回 ``(N, h, T, T)`` 注意力矩阵。
    :type return_attn: bool
    :returns: ``(N, T, C)`` 输出，或 ``(输出, 注意力)``。
    :raises InvalidInputError: 形状不匹配时。
    :raises NumericError: 输入包含非有限值时。
    """

    if q.shape != k.shape or k.shape != v.shape:
        raise InvalidInputError(f"Q/K/V 形状不一致: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    n, t, c = q.shape
    if c % heads:
        raise InvalidInputError(f"通道数 {c} 不能被头数 {heads} 整除")
    for name, tensor in (("Q", q), ("K", k), ("V", v)):
        if not torch.isfinite(tensor).all():
            raise NumericError(f"注意力输入 {name} 含非有限值")
    d = c // heads

    def split(x: torch.Tensor) -> torch.Tensor:
        return x.reshape(n, t, heads, d).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    attn = torch.softmax(qh @ kh.transpose(-2, -1) / math.sqrt(d), dim=-1)
    out = (attn @ vh).transpose(1, 2).reshape(n, t, c)
    if proj is not None:
        out = proj(out)
    if return_attn:
        return out, attn
    return out


class InteractiveSelfAttention(nn.Module):
    """
    交互式自注意力：两路各自投影出 Q/K/V，以共享查询 ``Q1 + Q2`` 分别关注自身的 K/V。

    :param channels: token 维度 C。
    :param heads: 头数 h。
    """

    def __init__(self, channels: int, heads: int) -> None:
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels={channels} 不能被 heads={heads} 整除")
        self.heads = heads
        self.q1 = nn.Linear(channels, channels)
        self.k1 = nn.Linear(channels, channels)
        self.v1 = nn.Linear(channels, channels)
        self.q2 = nn.Linear(channels, channels)
        self.k2 = nn.Linear(channels, channels)
        self.v2 = nn.Linear(channels, channels)
        self.proj1 = nn.Linear(channels, channels)
        self.proj2 = nn.Linear(channels, channels)
        self.apply(init_linear)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor, return_attn: bool = False):
        if x1.shape != x2.shape:
            raise InvalidInputError(f"ISA 两路输入形状不一致: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        q1, q2 = self.q1(x1), self.q2(x2)
        shared = q1 + q2
        out1 = msa(shared, self.k1(x1), self.v1(x1), self.heads, self.proj1, return_attn)
        out2 = msa(shared, self.k2(x2), self.v2(x2), self.heads, self.proj2, return_attn)
        if return_attn:
            return (out1[0], out2[0]), (out1[1], out2[1])
        return out1, out2


class Mlp(nn.Module):
    def __init__(self, channels: int, ratio: float) -> None:
        super().__init__()
        hidden = max(1, int(round(channels * ratio)))
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class InteractiveTransformerBlock(nn.Module):
    """
    ITB：逐窗口执行 ``F' = ISA(LN(F1), LN(F2)) + F``，再执行 ``F_out = MLP(LN(F')) + F'``。

    :param channels: 通道数 C。
    :param window_size: 窗口边长 M。
    :param heads: 头数。
    :param mlp_ratio: MLP 隐藏层倍率。
    """

    def __init__(self, channels: int, window_size: int, heads: int, mlp_ratio: float = 2.0) -> None:
        super().__init__()
        self.window_size = window_size
        self.norm1_a = nn.LayerNorm(channels)
        self.norm1_b = nn.LayerNorm(channels)
        self.isa = InteractiveSelfAttention(channels, heads)
        self.norm2_a = nn.LayerNorm(channels)
        self.norm2_b = nn.LayerNorm(channels)
        self.mlp_a = Mlp(channels, mlp_ratio)
        self.mlp_b = Mlp(channels, mlp_ratio)
        self.apply(init_linear)

    def zero_output_stages(self) -> None:
        _zero_(self.isa.proj1)
        _zero_(self.isa.proj2)
        _zero_(self.mlp_a.fc2)
        _zero_(self.mlp_b.fc2)

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if f1.shape != f2.shape:
            raise InvalidInputError(f"ITB 两路输入形状不一致: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        w1 = window_partition(f1, self.window_size)
        w2 = window_partition(f2, self.window_size)
        t1, t2 = w1.windows, w2.windows
        a1, a2 = self.isa(self.norm1_a(t1), self.norm1_b(t2))
        t1 = t1 + a1
        t2 = t2 + a2
        t1 = t1 + self.mlp_a(self.norm2_a(t1))
        t2 = t2 + self.mlp_b(self.norm2_b(t2))
        return window_reverse(w1.with_windows(t1)), window_reverse(w2.with_windows(t2))


class SwinLayer(nn.Module):
    """单个窗口注意力 Transformer 层，``shift > 0`` 时先循环平移再划分窗口。"""

    def __init__(self, channels: int, window_size: int, heads: int, mlp_ratio: float, shift: int = 0) -> None:
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels={channels} 不能被 heads={heads} 整除")
        self.window_size = window_size
        self.heads = heads
        self.shift = shift
        self.norm1 = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = Mlp(channels, mlp_ratio)
        self.apply(init_linear)

    def zero_output_stages(self) -> None:
        _zero_(self.proj)
        _zero_(self.mlp.fc2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(2, 3))
        ws = window_partition(x, self.window_size)
        t = ws.windows
        h = self.norm1(t)
        t = t + msa(self.q(h), self.k(h), self.v(h), self.heads, self.proj)
        t = t + self.mlp(self.norm2(t))
        x = window_reverse(ws.with_windows(t))
        if self.shift:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(2, 3))
        return x


class SwinBlock(nn.Module):
    """一对 Swin 层：常规窗口 + 平移 M/2 的窗口，无相对位置偏置、无注意力掩码。"""

    def __init__(self, channels: int, window_size: int, heads: int, mlp_ratio: float = 2.0) -> None:
        super().__init__()
        self.layers = nn.ModuleList(
            [
                SwinLayer(channels, window_size, heads, mlp_ratio, shift=0),
                SwinLayer(channels, window_size, heads, mlp_ratio, shift=window_size // 2),
            ]
        )

    def zero_output_stages(self) -> None:
        for layer in self.layers:
            layer.zero_output_stages()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class MSConv(nn.Module):
    """
    多尺度卷积：每个核尺寸一个分支（C → C/分支数，反射填充，LeakyReLU），拼接后 1×1 融合。
    """

    def __init__(self, channels: int, kernels: tuple[int, ...] = (1, 3, 5, 7), slope: float = 0.2) -> None:
        super().__init__()
        if channels % len(kernels):
            raise ConfigError(f"channels={channels} 不能被多尺度分支数 {len(kernels)} 整除")
        width = channels // len(kernels)
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(channels, width, k, padding=k // 2, padding_mode="reflect"),
                nn.LeakyReLU(slope),
            )
            for k in kernels
        )
        self.fuse = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fuse(torch.cat([branch(x) for branch in self.branches], dim=1))


class CBAM(nn.Module):
    """
    通道注意力（平均/最大池化共享 MLP，sigmoid 门控）后接空间注意力（通道平均/最大，7×7 卷积）。
    """

    def __init__(self, channels: int, reduction: int = 8, slope: float = 0.2, spatial_kernel: int = 7) -> None:
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.LeakyReLU(slope),
            nn.Conv2d(hidden, channels, 1),
        )
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2, padding_mode="reflect")

    def gates(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        :returns: ``(通道门 (B, C, 1, 1), 空间门 (B, 1, H, W))``，空间门基于通道加权后的特征。
        """
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        channel_gate = torch.sigmoid(self.mlp(avg) + self.mlp(mx))
        y = x * channel_gate
        pooled = torch.cat([y.mean(dim=1, keepdim=True), y.amax(dim=1, keepdim=True)], dim=1)
        spatial_gate = torch.sigmoid(self.spatial(pooled))
        return channel_gate, spatial_gate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        channel_gate, spatial_gate = self.gates(x)
        return x * channel_gate * spatial_gate


class GNLeakyReLU(nn.Module):
    """GroupNorm（eps 1e-5，可学习仿射）后接 LeakyReLU。"""

    def __init__(self, channels: int, groups: int = 4, slope: float = 0.2) -> None:
        super().__init__()
        if groups <= 0 or channels % groups:
            raise ConfigError(f"channels={channels} 不能被 gn_groups={groups} 整除")
        self.norm = nn.GroupNorm(groups, channels, eps=1e-5)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(x))


class RDSCB(nn.Module):
    """
    残差深度可分离卷积块：m 次 ``LR(PW(LR(DW_n(·))))``，与输入残差相加后经 GN&LR。

    :param channels: 通道数。
    :param kernel: 深度卷积核尺寸 n，正奇数。
    :param repeat: 重复次数 m。
    """

    def __init__(self, channels: int, kernel: int, repeat: int = 2, groups: int = 4, slope: float = 0.2) -> None:
        super().__init__()
        if kernel <= 0 or kernel % 2 == 0:
            raise ConfigError(f"RDSCB 核尺寸必须为正奇数: {kernel}")
        if repeat < 1:
            raise ConfigError(f"RDSCB 重复次数至少为 1: {repeat}")
        self.kernel = kernel
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(channels, channels, kernel, padding=kernel // 2, groups=channels, padding_mode="reflect"),
                nn.LeakyReLU(slope),
                nn.Conv2d(channels, channels, 1),
                nn.LeakyReLU(slope),
            )
            for _ in range(repeat)
        )
        self.gn_lr = GNLeakyReLU(channels, groups, slope)

    def zero_output_stages(self) -> None:
        _zero_(self.stages[-1][2])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x
        for stage in self.stages:
            y = stage(y)
        return self.gn_lr(y + x)


class LIA(nn.Module):
    """
    局部交互注意力：``F' = Concat(F1, F2)``，
    ``Att = α·MLP(Avg(F')) + β·MLP(Std(F'))``，输出 ``Conv_n(sigmoid(Att) ⊗ F')``（2C → C）。
    """

    def __init__(self, channels: int, kernel: int = 3, slope: float = 0.2) -> None:
        super().__init__()
        if kernel <= 0 or kernel % 2 == 0:
            raise ConfigError(f"LIA 核尺寸必须为正奇数: {kernel}")
        hidden = max(1, channels // 2)
        self.mlp = nn.Sequential(
            nn.Conv2d(2 * channels, hidden, 1),
            nn.LeakyReLU(slope),
            nn.Conv2d(hidden, 2 * channels, 1),
        )
        self.alpha = nn.Parameter(torch.tensor(1.0))
        self.beta = nn.Parameter(torch.tensor(1.0))
        self.conv = nn.Conv2d(2 * channels, channels, kernel, padding=kernel // 2, padding_mode="reflect")

    def attention(self, f1: torch.Tensor, f2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        :returns: ``(F', Att)``，``Att`` 为 sigmoid 之前的 ``(B, 2C, 1, 1)`` 通道注意力。
        :raises InvalidInputError: 两路形状不一致时。
        """
        if f1.shape != f2.shape:
            raise InvalidInputError(f"LIA 两路输入形状不一致: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        cat = torch.cat([f1, f2], dim=1)
        avg = cat.mean(dim=(2, 3), keepdim=True)
        var = cat.var(dim=(2, 3), keepdim=True, unbiased=False)
        std = torch.sqrt(torch.clamp(var, min=1e-12))
        att = self.alpha * self.mlp(avg) + self.beta * self.mlp(std)
        return cat, att

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        cat, att = self.attention(f1, f2)
        return self.conv(torch.sigmoid(att) * cat)
