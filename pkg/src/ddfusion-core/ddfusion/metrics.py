"""
ddfusion.metrics
================

六个融合质量指标：VIF、AG、EI、Qabf、SF、Qw。

指标函数接收 0–255 刻度的二维 ``float64`` 数组；``evaluate`` 负责把 [0, 1] 图像换算过去。
所有常量集中在 ``METRIC_CONSTANTS``，报告中的列顺序固定为 ``pair,vif,ag,ei,qabf,sf,qw``。
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view
from rich.table import Table
from scipy.signal import convolve2d

from .errors import InvalidInputError
from .imaging import luminance
from .utils.template import format_metric, render_template

METRIC_COLUMNS = ["vif", "ag", "ei", "qabf", "sf", "qw"]
REPORT_COLUMNS = ["pair", *METRIC_COLUMNS]
MEAN_ROW = "mean"

METRIC_CONSTANTS = {
    # Qabf 边缘强度/方向保持的 sigmoid 参数
    "qabf_tg": 0.9994,
    "qabf_kg": -15.0,
    "qabf_dg": 0.5,
    "qabf_ta": 0.9879,
    "qabf_ka": -22.0,
    "qabf_da": 0.8,
    "qabf_l": 1.0,
    # Qw 滑窗边长与分母保护
    "qw_window": 8,
    "qw_eps": 1e-10,
    # 像素域 VIF
    "vif_sigma_nsq": 2.0,
    "vif_scales": 4,
    "vif_eps": 1e-10,
}

VIF_MIN_SIDE = 41

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _plane(img: np.ndarray, min_side: int = 2) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise InvalidInputError(f"指标需要二维灰度图，实际形状为 {img.shape}")
    if min(img.shape) < min_side:
        raise InvalidInputError(f"指标要求边长至少为 {min_side}，实际为 {img.shape}")
    return img


def _aligned(*imgs: np.ndarray, min_side: int = 2) -> list[np.ndarray]:
    planes = [_plane(img, min_side) for img in imgs]
    if len({p.shape for p in planes}) != 1:
        raise InvalidInputError(f"指标输入尺寸不一致: {[p.shape for p in planes]}")
    return planes


def sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """反射填充的 Sobel 响应 ``(gx, gy)``，与输入同尺寸。"""

    padded = np.pad(img, 1, mode="reflect")
    # convolve2d 翻转核，取负号使 gx 对应从左到右递增
    gx = -convolve2d(padded, _SOBEL_X, mode="valid")
    gy = -convolve2d(padded, _SOBEL_Y, mode="valid")
    return gx, gy


def ag(img: np.ndarray) -> float:
    """
    平均梯度：前向差分 ``sqrt((dx^2 + dy^2) / 2)`` 在 ``(H-1)×(W-1)`` 个位置上的均值。
    """

    img = _plane(img)
    dx = img[:-1, 1:] - img[:-1, :-1]
    dy = img[1:, :-1] - img[:-1, :-1]
    return float(np.mean(np.sqrt((dx**2 + dy**2) / 2.0)))


def sf(img: np.ndarray) -> float:
    """空间频率 ``sqrt(RF^2 + CF^2)``，RF/CF 为行内/列内相邻差分的均方根。"""

    img = _plane(img)
    rf = np.sqrt(np.mean((img[:, 1:] - img[:, :-1]) ** 2))
    cf = np.sqrt(np.mean((img[1:, :] - img[:-1, :]) ** 2))
    return float(np.sqrt(rf**2 + cf**2))


def ei(img: np.ndarray) -> float:
    """边缘强度：Sobel 梯度幅值的均值。"""

    img = _plane(img, min_side=3)
    gx, gy = sobel(img)
    return float(np.mean(np.sqrt(gx**2 + gy**2)))


def _edge_preservation(g_src: np.ndarray, a_src: np.ndarray, g_f: np.ndarray, a_f: np.ndarray) -> np.ndarray:
    c = METRIC_CONSTANTS
    ratio = np.ones_like(g_src)
    smaller_src = g_src < g_f
    larger_src = g_src > g_f
    ratio[larger_src] = g_f[larger_src] / g_src[larger_src]
    ratio[smaller_src] = g_src[smaller_src] / g_f[smaller_src]
    # 方向为轴向量，差值按 π 取模
    diff = np.mod(np.abs(a_src - a_f), math.pi)
    diff = np.minimum(diff, math.pi - diff)
    agreement = 1.0 - diff / (math.pi / 2.0)
    q_g = c["qabf_tg"] / (1.0 + np.exp(c["qabf_kg"] * (ratio - c["qabf_dg"])))
    q_a = c["qabf_ta"] / (1.0 + np.exp(c["qabf_ka"] * (agreement - c["qabf_da"])))
    return q_g * q_a


def _strength_orientation(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = sobel(img)
    return np.sqrt(gx**2 + gy**2), np.arctan2(gy, gx)


def qabf(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """
    边缘信息传递指标 Qabf。

    源图与融合图的 Sobel 强度比与方向一致性经 sigmoid 映射后相乘，再以源图边缘强度加权平均。
    三幅图都没有边缘时按约定返回 0。
    使用标准 sigmoid 常数时，``f = a = b`` 的取值约为 0.9748，达不到 1。

    :param a: 源图 A（红外）。
    :type a: numpy.ndarray
    :param b: 源图 B（可见光）。
    :type b: numpy.ndarray
    :param f: 融合图。
    :type f: numpy.ndarray
    :returns: [0, 1] 内的指标值。
    :rtype: float
    """

    a, b, f = _aligned(a, b, f, min_side=3)
    g_a, o_a = _strength_orientation(a)
    g_b, o_b = _strength_orientation(b)
    g_f, o_f = _strength_orientation(f)
    w_a = g_a ** METRIC_CONSTANTS["qabf_l"]
    w_b = g_b ** METRIC_CONSTANTS["qabf_l"]
    denominator = float(np.sum(w_a + w_b))
    if denominator <= 0:
        return 0.0
    numerator = np.sum(_edge_preservation(g_a, o_a, g_f, o_f) * w_a + _edge_preservation(g_b, o_b, g_f, o_f) * w_b)
    return float(np.clip(numerator / denominator, 0.0, 1.0))


def _uqi(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """逐窗口的通用质量指数，``x``/``y`` 形状为 ``(n, k, k)``。"""

    eps = METRIC_CONSTANTS["qw_eps"]
    mx = x.mean(axis=(1, 2))
    my = y.mean(axis=(1, 2))
    vx = x.var(axis=(1, 2))
    vy = y.var(axis=(1, 2))
    cov = ((x - mx[:, None, None]) * (y - my[:, None, None])).mean(axis=(1, 2))
    numerator = 4.0 * cov * mx * my
    denominator = (vx + vy) * (mx**2 + my**2)
    out = np.zeros_like(mx)
    regular = denominator >= eps
    out[regular] = numerator[regular] / denominator[regular]
    identical = np.all(x == y, axis=(1, 2))
    out[~regular & identical] = 1.0
    return out


def qw(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """
    加权融合质量指标 Qw：8×8 滑窗（步长 1）内以方差为显著性，
    对 ``UQI(a, f)`` 与 ``UQI(b, f)`` 做局部加权，再按窗口显著性全局加权。

    :returns: 不超过 1 的指标值。
    :rtype: float
    """

    k = METRIC_CONSTANTS["qw_window"]
    a, b, f = _aligned(a, b, f, min_side=k)
    wa = sliding_window_view(a, (k, k)).reshape(-1, k, k)
    wb = sliding_window_view(b, (k, k)).reshape(-1, k, k)
    wf = sliding_window_view(f, (k, k)).reshape(-1, k, k)
    sa = wa.var(axis=(1, 2))
    sb = wb.var(axis=(1, 2))
    total = sa + sb
    lam = np.full_like(sa, 0.5)
    nonflat = total > 0
    lam[nonflat] = sa[nonflat] / total[nonflat]
    local = lam * _uqi(wa, wf) + (1.0 - lam) * _uqi(wb, wf)
    saliency = np.maximum(sa, sb)
    if saliency.sum() > 0:
        weights = saliency / saliency.sum()
    else:
        weights = np.full_like(saliency, 1.0 / saliency.size)
    return float(np.sum(weights * local))


def _vif_window(size: int) -> np.ndarray:
    sd = size / 5.0
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half : half + 1, -half : half + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sd * sd))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def vif(ref: np.ndarray, dist: np.ndarray) -> float:
    """
    像素域多尺度 VIF（4 个尺度，高斯金字塔，σ_n² = 2）。

    参考图没有任何可用信息（分母为 0）时，失真图与参考图相同返回 1，否则返回 0。

    :param ref: 参考图，边长至少 41。
    :type ref: numpy.ndarray
    :param dist: 失真图（融合图）。
    :type dist: numpy.ndarray
    :returns: 信息保真度之比，截断到 [0, 1]。
    :rtype: float
    """

    ref, dist = _aligned(ref, dist, min_side=VIF_MIN_SIDE)
    identical = bool(np.array_equal(ref, dist))
    c = METRIC_CONSTANTS
    sigma_nsq, eps = c["vif_sigma_nsq"], c["vif_eps"]
    num = 0.0
    den = 0.0
    for scale in range(1, int(c["vif_scales"]) + 1):
        win = _vif_window(2 ** (4 - scale + 1) + 1)
        if scale > 1:
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        sigma1_sq = np.maximum(convolve2d(ref * ref, win, mode="valid") - mu1 * mu1, 0.0)
        sigma2_sq = np.maximum(convolve2d(dist * dist, win, mode="valid") - mu2 * mu2, 0.0)
        sigma12 = convolve2d(ref * dist, win, mode="valid") - mu1 * mu2

        g = sigma12 / (sigma1_sq + eps)
        sv_sq = sigma2_sq - g * sigma12

        flat_ref = sigma1_sq < eps
        g[flat_ref] = 0
        sv_sq[flat_ref] = sigma2_sq[flat_ref]
        sigma1_sq[flat_ref] = 0

        flat_dist = sigma2_sq < eps
        g[flat_dist] = 0
        sv_sq[flat_dist] = 0

        negative = g < 0
        sv_sq[negative] = sigma2_sq[negative]
        g[negative] = 0
        sv_sq = np.maximum(sv_sq, eps)

        num += float(np.sum(np.log10(1.0 + g * g * sigma1_sq / (sv_sq + sigma_nsq))))
        den += float(np.sum(np.log10(1.0 + sigma1_sq / sigma_nsq)))
    if den <= 0:
        return 1.0 if identical else 0.0
    # 增益大于 1 的失真图可使比值超过 1，截断到上界
    return min(num / den, 1.0)


def fusion_vif(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """双源约定：``(vif(a, f) + vif(b, f)) / 2``。"""

    return 0.5 * (vif(a, f) + vif(b, f))


@dataclass(frozen=True, slots=True)
class EvaluationTriple:
    """一组待评估图像，均为 [0, 1] 的 ``(C, H, W)`` 图像。"""

    name: str
    ir: np.ndarray
    vi: np.ndarray
    fused: np.ndarray


@dataclass
class MetricReport:
    """
    逐对指标与均值行。

    :param rows: 每对图像一行，键为 ``REPORT_COLUMNS``；失败的指标为 NaN。
    :param failures: ``(图像名, 指标名, 错误信息)`` 列表。
    """

    rows: list[dict[str, object]]
    failures: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def frame(self) -> pd.DataFrame:
        """含均值行的表格，均值行的 ``pair`` 为 ``mean``。"""

        body = pd.DataFrame(self.rows, columns=REPORT_COLUMNS)
        means = {"pair": MEAN_ROW, **{m: body[m].astype(float).mean() for m in METRIC_COLUMNS}}
        return pd.concat([body, pd.DataFrame([means], columns=REPORT_COLUMNS)], ignore_index=True)

    @property
    def means(self) -> dict[str, float]:
        row = self.frame.iloc[-1]
        return {m: float(row[m]) for m in METRIC_COLUMNS}

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.10g")

    def to_table(self, title: str = "融合质量指标") -> Table:
        table = Table(title=title)
        table.add_column("pair", style="cyan")
        for metric in METRIC_COLUMNS:
            table.add_column(metric, justify="right")
        for record in self.frame.to_dict(orient="records"):
            style = "bold" if record["pair"] == MEAN_ROW else None
            table.add_row(
                str(record["pair"]),
                *[format_metric(record[m]) for m in METRIC_COLUMNS],
                style=style,
            )
        return table

    def to_markdown(self, title: str = "DDFusion evaluation") -> str:
        records = self.frame.to_dict(orient="records")
        return render_template(
            "report.md.j2",
            {
                "title": title,
                "metrics": METRIC_COLUMNS,
                "rows": records[:-1],
                "mean": records[-1],
                "failures": self.failures,
                "constants": METRIC_CONSTANTS,
            },
        )


def _metric_calls(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> dict[str, Callable[[], float]]:
    return {
        "vif": lambda: fusion_vif(a, b, f),
        "ag": lambda: ag(f),
        "ei": lambda: ei(f),
        "qabf": lambda: qabf(a, b, f),
        "sf": lambda: sf(f),
        "qw": lambda: qw(a, b, f),
    }


def evaluate_triple(triple: EvaluationTriple) -> tuple[dict[str, object], list[tuple[str, str, str]]]:
    """计算一组图像的六个指标，单个指标失败时记为 NaN 并继续。"""

    a = luminance(triple.ir)[0] * 255.0
    b = luminance(triple.vi)[0] * 255.0
    f = luminance(triple.fused)[0] * 255.0
    row: dict[str, object] = {"pair": triple.name}
    failures: list[tuple[str, str, str]] = []
    for metric, call in _metric_calls(a, b, f).items():
        try:
            value = call()
            if not math.isfinite(value):
                raise ArithmeticError(f"非有限值 {value}")
            row[metric] = value
        except (InvalidInputError, ArithmeticError, ValueError) as error:
            logger.warning("metric failed pair=[{}] metric=[{}] error=[{}]", triple.name, metric, error)
            row[metric] = float("nan")
            failures.append((triple.name, metric, str(error)))
    return row, failures


def evaluate(triples: Iterable[EvaluationTriple], jobs: int = 1) -> MetricReport:
    """
    对多组图像计算全部指标。

    :param triples: 待评估的图像组。
    :type triples: Iterable[EvaluationTriple]
    :param jobs: 并行线程数，结果顺序与输入一致。
    :type jobs: int
    :returns: 指标报告。
    :rtype: MetricReport
    """

    triples = list(triples)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results: Sequence = list(pool.map(evaluate_triple, triples))
    else:
        results = [evaluate_triple(t) for t in triples]
    rows = [row for row, _ in results]
    failures = [item for _, fails in results for item in fails]
    logger.info("evaluation finished pairs=[{}] failures=[{}]", len(rows), len(failures))
    return MetricReport(rows=rows, failures=failures)
