"""
ddfusion.decomposition
======================

两种面向退化类型的分解：

- 红外：正交 2D-DCT 频谱按对角截止 ``u/H + v/W <= tau`` 划分为低频/高频；
- 可见光：单尺度 Retinex，高斯模糊估计照度 L，反射 R = I / L。
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft
from scipy.ndimage import gaussian_filter

from .errors import InvalidInputError

ILLUMINATION_FLOOR = 1e-4
DEFAULT_TAU = 0.25
DEFAULT_RETINEX_SIGMA = 15.0


def _check_plane(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim < 2:
        raise InvalidInputError(f"需要至少二维的平面，实际形状为 {plane.shape}")
    h, w = plane.shape[-2:]
    if h < 8 or w < 8:
        raise InvalidInputError(f"平面边长至少为 8，实际为 {h}x{w}")
    return plane


def dct2(plane: np.ndarray) -> np.ndarray:
    """
    正交 II 型二维 DCT，作用于最后两个轴。

    :param plane: ``(..., H, W)`` 实数数组。
    :type plane: numpy.ndarray
    :returns: 同形状的频谱系数。
    :rtype: numpy.ndarray
    """

    plane = _check_plane(plane)
    return fft.dctn(plane, type=2, norm="ortho", axes=(-2, -1))


def idct2(spectrum: np.ndarray) -> np.ndarray:
    """``dct2`` 的精确逆变换。"""

    spectrum = np.asarray(spectrum, dtype=np.float64)
    return fft.idctn(spectrum, type=2, norm="ortho", axes=(-2, -1))


def low_mask(height: int, width: int, tau: float) -> np.ndarray:
    """
    低频掩码：系数 (u, v) 属于低频当且仅当 ``u/H + v/W <= tau``。

    :returns: ``(H, W)`` 布尔数组，高频掩码为其补集。
    :rtype: numpy.ndarray
    """

    if not 0.0 <= tau <= 2.0:
        raise InvalidInputError(f"tau 超出 [0, 2]: {tau}")
    u = np.arange(height)[:, None] / height
    v = np.arange(width)[None, :] / width
    return (u + v) <= tau


@dataclass(frozen=True, slots=True)
class FrequencyPair:
    """低频与高频频谱，二者支撑集互补，相加等于原频谱。"""

    low: np.ndarray
    high: np.ndarray
    tau: float

    def merged(self) -> np.ndarray:
        return self.low + self.high


@dataclass(frozen=True, slots=True)
class RetinexPair:
    """反射分量（≥ 0）与照度分量（[floor, 1]）。"""

    reflectance: np.ndarray
    illumination: np.ndarray

    def recompose(self) -> np.ndarray:
        return self.reflectance * self.illumination


def split_frequency(spectrum: np.ndarray, tau: float = DEFAULT_TAU) -> FrequencyPair:
    """
    按对角截止把频谱划分为低频与高频。

    :param spectrum: ``(..., H, W)`` 频谱。
    :type spectrum: numpy.ndarray
    :param tau: 截止阈值，取值 [0, 2]。
    :type tau: float
    :returns: 互补的低频/高频对。
    :rtype: FrequencyPair
    :raises InvalidInputError: ``tau`` 超出范围时。
    """

    spectrum = np.asarray(spectrum, dtype=np.float64)
    h, w = spectrum.shape[-2:]
    mask = low_mask(h, w, tau)
    low = np.where(mask, spectrum, 0.0)
    high = np.where(mask, 0.0, spectrum)
    return FrequencyPair(low=low, high=high, tau=tau)


def frequency_decompose(plane: np.ndarray, tau: float = DEFAULT_TAU) -> tuple[np.ndarray, np.ndarray]:
    """
    在图像域给出两个频带的分量：``idct2(low)`` 与 ``idct2(high)``，二者之和等于输入。
    """

    pair = split_frequency(dct2(plane), tau)
    return idct2(pair.low), idct2(pair.high)


def retinex_decompose(
    img: np.ndarray,
    sigma: float = DEFAULT_RETINEX_SIGMA,
    floor: float = ILLUMINATION_FLOOR,
) -> RetinexPair:
    """
    单尺度 Retinex 分解。

    照度为高斯模糊（半径 3σ，反射边界）后截断到 ``[floor, 1]`` 的结果，
    反射为 ``img / L`` 且不截断。

    :param img: 单通道平面，``(H, W)`` 或 ``(1, H, W)``。
    :type img: numpy.ndarray
    :param sigma: 模糊标准差，单位像素。
    :type sigma: float
    :param floor: 照度下限。
    :type floor: float
    :returns: 反射与照度。
    :rtype: RetinexPair
    """

    img = _check_plane(img)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise InvalidInputError(f"Retinex 分解需要单通道图像，实际为 {img.shape[0]} 通道")
        blurred = gaussian_filter(img[0], sigma=sigma, mode="reflect", truncate=3.0)[None]
    elif img.ndim == 2:
        blurred = gaussian_filter(img, sigma=sigma, mode="reflect", truncate=3.0)
    else:
        raise InvalidInputError(f"Retinex 分解不支持形状 {img.shape}")
    illumination = np.clip(blurred, floor, 1.0)
    return RetinexPair(reflectance=img / illumination, illumination=illumination)


@dataclass(frozen=True, slots=True)
class BandEnergy:
    """
    退化在两个频带内新增的能量。

    ``*_density`` 为按系数个数归一化的平均能量，用于比较面积悬殊的两个频带。
    """

    low: float
    high: float
    low_count: int
    high_count: int

    @property
    def low_density(self) -> float:
        return self.low / max(self.low_count, 1)

    @property
    def high_density(self) -> float:
        return self.high / max(self.high_count, 1)


def band_energy_report(clean: np.ndarray, corrupted: np.ndarray, tau: float = DEFAULT_TAU) -> BandEnergy:
    """
    统计 ``corrupted - clean`` 在低频/高频带中的能量。

    :param clean: 干净平面。
    :type clean: numpy.ndarray
    :param corrupted: 退化平面，形状与 ``clean`` 一致。
    :type corrupted: numpy.ndarray
    :param tau: 截止阈值。
    :type tau: float
    :returns: 两个频带的总能量与系数个数。
    :rtype: BandEnergy
    """

    clean = _check_plane(clean)
    corrupted = _check_plane(corrupted)
    if clean.shape != corrupted.shape:
        raise InvalidInputError(f"形状不一致: {clean.shape} vs {corrupted.shape}")
    pair = split_frequency(dct2(corrupted - clean), tau)
    mask = low_mask(*clean.shape[-2:], tau)
    per_plane = int(np.prod(clean.shape[:-2], dtype=np.int64)) if clean.ndim > 2 else 1
    return BandEnergy(
        low=float(np.sum(pair.low**2)),
        high=float(np.sum(pair.high**2)),
        low_count=int(mask.sum()) * per_plane,
        high_count=int((~mask).sum()) * per_plane,
    )
