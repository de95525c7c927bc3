"""
ddfusion.imaging
================

图像读写、YCbCr 颜色空间转换与可复现的退化合成。

图像统一表示为 ``float64`` 的 ``numpy.ndarray``，形状 ``(C, H, W)``，C 为 1 或 3，
取值 [0, 1]。所有公开函数都是纯函数，输出一律截断到 [0, 1]。
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import ImageIOError, InvalidInputError
from .models import DegradationSpec, Orientation

MIN_SIDE = 8

# BT.601 full-range
_RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)
_YCC_OFFSET = np.array([0.0, 0.5, 0.5])


@dataclass(frozen=True, slots=True)
class YCbCrImage:
    """三个单通道平面，形状均为 ``(1, H, W)``。"""

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self) -> None:
        shapes = {self.y.shape, self.cb.shape, self.cr.shape}
        if len(shapes) != 1:
            raise InvalidInputError(f"YCbCr 平面尺寸不一致: {sorted(shapes)}")
        if self.y.ndim != 3 or self.y.shape[0] != 1:
            raise InvalidInputError(f"YCbCr 平面需为 (1, H, W)，实际为 {self.y.shape}")


def check_image(img: np.ndarray, channels: int | None = None) -> np.ndarray:
    """
    校验并返回 ``float64`` 图像。

    :param img: 待校验图像。
    :type img: numpy.ndarray
    :param channels: 期望的通道数，``None`` 表示 1 或 3 均可。
    :type channels: int | None
    :returns: ``float64`` 视图或副本。
    :rtype: numpy.ndarray
    :raises InvalidInputError: 维度、通道数、尺寸或数值不合法时。
    """

    if not isinstance(img, np.ndarray) or img.ndim != 3:
        raise InvalidInputError(f"图像需为 (C, H, W) 数组，实际为 {getattr(img, 'shape', type(img))}")
    c, h, w = img.shape
    if channels is not None and c != channels:
        raise InvalidInputError(f"需要 {channels} 通道图像，实际为 {c} 通道")
    if c not in (1, 3):
        raise InvalidInputError(f"仅支持 1 或 3 通道图像，实际为 {c}")
    if h < MIN_SIDE or w < MIN_SIDE:
        raise InvalidInputError(f"图像边长至少为 {MIN_SIDE}，实际为 {h}x{w}")
    img = img.astype(np.float64, copy=False)
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("图像包含非有限数值")
    return img


def rgb_to_ycbcr(img: np.ndarray) -> YCbCrImage:
    """
    RGB 转 YCbCr（BT.601 全范围），Cb/Cr 以 0.5 为中心。

    :param img: 3 通道图像。
    :type img: numpy.ndarray
    :returns: 三个平面。
    :rtype: YCbCrImage
    :raises InvalidInputError: 通道数不为 3 时。
    """

    img = check_image(img, channels=3)
    ycc = np.einsum("ij,jhw->ihw", _RGB_TO_YCC, img) + _YCC_OFFSET[:, None, None]
    ycc = np.clip(ycc, 0.0, 1.0)
    return YCbCrImage(y=ycc[0:1], cb=ycc[1:2], cr=ycc[2:3])


def ycbcr_to_rgb(ycc: YCbCrImage) -> np.ndarray:
    """
    YCbCr 转回 RGB，使用正变换矩阵的精确逆，结果截断到 [0, 1]。

    :param ycc: 三个对齐的平面。
    :type ycc: YCbCrImage
    :returns: 3 通道图像。
    :rtype: numpy.ndarray
    """

    stacked = np.concatenate([ycc.y, ycc.cb, ycc.cr], axis=0).astype(np.float64)
    stacked = stacked - _YCC_OFFSET[:, None, None]
    rgb = np.einsum("ij,jhw->ihw", _YCC_TO_RGB, stacked)
    return np.clip(rgb, 0.0, 1.0)


def luminance(img: np.ndarray) -> np.ndarray:
    """单通道图像原样返回，RGB 图像返回其 Y 平面。"""

    img = check_image(img)
    if img.shape[0] == 1:
        return img
    return rgb_to_ycbcr(img).y


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """
    叠加独立同分布的零均值高斯噪声。

    :param img: 输入图像。
    :type img: numpy.ndarray
    :param sigma: 标准差，0–255 刻度。
    :type sigma: float
    :param seed: 随机种子。
    :type seed: int
    :returns: 截断到 [0, 1] 的加噪图像。
    :rtype: numpy.ndarray
    :raises InvalidInputError: ``sigma`` 为负时。
    """

    img = check_image(img)
    if sigma < 0:
        raise InvalidInputError(f"sigma 不能为负: {sigma}")
    if sigma == 0:
        return img.copy()
    noise = _rng(seed).normal(0.0, sigma / 255.0, size=img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def stripe_offsets(length: int, intensity: float, seed: int) -> np.ndarray:
    """
    条纹偏置序列：每条线一个常数，独立均匀分布于 [-a, a]/255。

    :param length: 线的条数（竖条纹为列数，横条纹为行数）。
    :type length: int
    :param intensity: 幅度上界 a，0–255 刻度。
    :type intensity: float
    :param seed: 随机种子。
    :type seed: int
    :returns: 长度为 ``length`` 的偏置数组。
    :rtype: numpy.ndarray
    """

    if intensity < 0:
        raise InvalidInputError(f"条纹强度不能为负: {intensity}")
    return _rng(seed).uniform(-intensity, intensity, size=length) / 255.0


def add_stripe_noise(img: np.ndarray, intensity: float, orientation: Orientation, seed: int) -> np.ndarray:
    """
    叠加固定模式条纹噪声，各通道共享同一组偏置。

    :param img: 输入图像。
    :type img: numpy.ndarray
    :param intensity: 幅度上界，0–255 刻度。
    :type intensity: float
    :param orientation: ``vertical``（逐列）或 ``horizontal``（逐行）。
    :type orientation: Orientation
    :param seed: 随机种子。
    :type seed: int
    :returns: 截断到 [0, 1] 的图像。
    :rtype: numpy.ndarray
    :raises InvalidInputError: 强度为负或方向未知时。
    """

    img = check_image(img)
    if intensity < 0:
        raise InvalidInputError(f"条纹强度不能为负: {intensity}")
    if orientation not in ("vertical", "horizontal"):
        raise InvalidInputError(f"未知的条纹方向: {orientation}")
    if intensity == 0:
        return img.copy()
    _, h, w = img.shape
    if orientation == "vertical":
        offsets = stripe_offsets(w, intensity, seed)[None, None, :]
    else:
        offsets = stripe_offsets(h, intensity, seed)[None, :, None]
    return np.clip(img + offsets, 0.0, 1.0)


def darken(img: np.ndarray, gamma: float) -> np.ndarray:
    """逐像素幂次暗化 ``img ** gamma``，``gamma`` 需 ≥ 1。"""

    img = check_image(img)
    if gamma < 1:
        raise InvalidInputError(f"gamma 必须 ≥ 1: {gamma}")
    return np.clip(np.power(img, gamma), 0.0, 1.0)


def _mean_luminance(img: np.ndarray) -> float:
    if img.shape[0] == 1:
        return float(img.mean())
    return float(np.einsum("j,jhw->hw", _RGB_TO_YCC[0], img).mean())


def reference_enhance(img: np.ndarray) -> np.ndarray:
    """
    内置的确定性参考增强：``x ** (1/2.2)`` 提亮后做灰度世界白平衡。

    白平衡可能把平均亮度压到输入以下，此时退回只提亮的结果，
    保证输出平均亮度不低于输入。

    :param img: 输入图像。
    :type img: numpy.ndarray
    :returns: 增强后的图像。
    :rtype: numpy.ndarray
    """

    img = check_image(img)
    lifted = np.power(img, 1.0 / 2.2)
    if img.shape[0] == 1:
        return np.clip(lifted, 0.0, 1.0)
    channel_means = lifted.mean(axis=(1, 2))
    if np.any(channel_means <= 0):
        balanced = lifted
    else:
        gains = channel_means.mean() / channel_means
        balanced = np.clip(lifted * gains[:, None, None], 0.0, 1.0)
    if _mean_luminance(balanced) < _mean_luminance(img):
        return np.clip(lifted, 0.0, 1.0)
    return balanced


def _sub_seeds(seed: int, count: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


def degrade_infrared(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """
    按退化参数合成退化红外图：先叠加条纹噪声，再叠加高斯噪声。

    两种噪声使用由 ``spec.seed`` 派生的独立子种子。
    """

    stripe_seed, noise_seed = _sub_seeds(spec.seed, 2)
    out = add_stripe_noise(img, spec.stripe_intensity, spec.stripe_orientation, stripe_seed)
    return add_gaussian_noise(out, spec.gaussian_sigma, noise_seed)


def degrade_visible(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """按 ``spec.lowlight_gamma`` 合成低照度可见光图。"""

    return darken(img, spec.lowlight_gamma)


def load_png(path: str | Path) -> np.ndarray:
    """
    读取 8 位灰度或 RGB PNG，归一化到 [0, 1]。

    :param path: 文件路径。
    :type path: str | pathlib.Path
    :returns: ``(C, H, W)`` 图像。
    :rtype: numpy.ndarray
    :raises ImageIOError: 文件缺失、无法解码、位深或通道数不受支持时。
    """

    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"图像文件不存在: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageIOError(f"无法解码图像: {path}")
    if raw.dtype != np.uint8:
        raise ImageIOError(f"仅支持 8 位图像，{path} 的数据类型为 {raw.dtype}")
    if raw.ndim == 2:
        arr = raw[None, :, :]
    elif raw.ndim == 3 and raw.shape[2] == 3:
        arr = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).transpose(2, 0, 1)
    else:
        raise ImageIOError(f"仅支持灰度或 RGB 图像，{path} 的形状为 {raw.shape}")
    if arr.shape[1] < MIN_SIDE or arr.shape[2] < MIN_SIDE:
        raise ImageIOError(f"图像边长至少为 {MIN_SIDE}，{path} 为 {arr.shape[1]}x{arr.shape[2]}")
    return arr.astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """按四舍五入（半数进位）量化到 ``uint8``。"""

    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img: np.ndarray, path: str | Path) -> None:
    """
    保存为 8 位 PNG，自动创建父目录。

    :param img: 1 或 3 通道图像。
    :type img: numpy.ndarray
    :param path: 目标路径。
    :type path: str | pathlib.Path
    :raises ImageIOError: 写入失败时。
    """

    img = check_image(img)
    path = Path(path)
    data = quantize(img)
    if data.shape[0] == 1:
        data = data[0]
    else:
        data = cv2.cvtColor(np.ascontiguousarray(data.transpose(1, 2, 0)), cv2.COLOR_RGB2BGR)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        ok = cv2.imwrite(str(path), data)
    except (OSError, cv2.error) as error:
        raise ImageIOError(f"写入图像失败 {path}: {error}") from error
    if not ok:
        raise ImageIOError(f"写入图像失败: {path}")
