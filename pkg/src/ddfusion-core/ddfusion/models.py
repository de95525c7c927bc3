"""
ddfusion.models
===============

项目中流转的配置与记录类型。全部为冻结 dataclass，构造时校验取值，
``from_mapping`` / ``to_mapping`` 负责与 TOML 文档互转（未知键直接拒绝，缺失键使用默认值）。
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Literal, Mapping, TypeVar, get_args

from .errors import ConfigError, InvalidInputError

CONFIG_VERSION = 1

Orientation = Literal["vertical", "horizontal"]
DegradationMode = Literal["both", "gaussian", "stripe", "mixed"]
Ablation = Literal["none", "no_ddon", "no_ilgfn"]

ORIENTATIONS: tuple[str, ...] = get_args(Orientation)
DEGRADATION_MODES: tuple[str, ...] = get_args(DegradationMode)
ABLATIONS: tuple[str, ...] = get_args(Ablation)

_T = TypeVar("_T")


def _coerce(section: str, key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}].{key} 需要布尔值，实际为 {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) == 0:
            raise ConfigError(f"[{section}].{key} 需要非空数组，实际为 {value!r}")
        item_default = default[0]
        return tuple(_coerce(section, key, item_default, item) for item in value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}].{key} 需要整数，实际为 {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}].{key} 需要数值，实际为 {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}].{key} 需要字符串，实际为 {value!r}")
        return value
    return value


def _section_from_mapping(cls: type[_T], mapping: Mapping[str, Any] | None, section: str) -> _T:
    """
    按 dataclass 字段把一个配置节转换为对象。

    :param cls: 目标 dataclass，所有字段都必须带默认值。
    :type cls: type
    :param mapping: 配置节内容，``None`` 表示整节缺失。
    :type mapping: Mapping[str, Any] | None
    :param section: 节名称，用于错误信息。
    :type section: str
    :returns: 构造好的对象。
    :raises ConfigError: 出现未知键、类型不符或取值非法时。
    """

    if mapping is None:
        return cls()
    if not isinstance(mapping, Mapping):
        raise ConfigError(f"[{section}] 必须是表，实际为 {type(mapping).__name__}")
    defaults = cls()
    names = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"[{section}] 存在未知配置项: {', '.join(unknown)}")
    kwargs = {
        key: _coerce(section, key, getattr(defaults, key), value)
        for key, value in mapping.items()
    }
    try:
        return cls(**kwargs)
    except InvalidInputError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _to_plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


@dataclass(frozen=True, slots=True)
class DegradationSpec:
    """
    一次退化合成的完整参数。噪声强度均以 0–255 为刻度。

    :param gaussian_sigma: 高斯噪声标准差，取值 [0, 30]。
    :param stripe_intensity: 条纹噪声幅度上界，取值 [0, 30]。
    :param stripe_orientation: 条纹方向，``vertical`` 为逐列偏置。
    :param lowlight_gamma: 可见光暗化幂次，``1`` 表示不暗化。
    :param seed: 随机种子，相同参数与种子给出逐位一致的结果。
    """

    gaussian_sigma: float = 0.0
    stripe_intensity: float = 0.0
    stripe_orientation: Orientation = "vertical"
    lowlight_gamma: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gaussian_sigma <= 30.0:
            raise InvalidInputError(f"gaussian_sigma 超出 [0, 30]: {self.gaussian_sigma}")
        if not 0.0 <= self.stripe_intensity <= 30.0:
            raise InvalidInputError(f"stripe_intensity 超出 [0, 30]: {self.stripe_intensity}")
        if self.stripe_orientation not in ORIENTATIONS:
            raise InvalidInputError(f"stripe_orientation 仅支持 {ORIENTATIONS}: {self.stripe_orientation}")
        if self.lowlight_gamma < 1.0:
            raise InvalidInputError(f"lowlight_gamma 必须 ≥ 1: {self.lowlight_gamma}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any] | None) -> "DegradationSpec":
        return _section_from_mapping(cls, mapping, "degradation")

    def to_mapping(self) -> dict[str, Any]:
        return _to_plain(asdict(self))


@dataclass(frozen=True, slots=True)
class BlockConfig:
    """
    网络模块的结构超参数。

    :param channels: 特征通道数 C。
    :param window_size: 窗口注意力边长 M。
    :param heads: 注意力头数 h，需整除 C。
    :param mlp_ratio: Transformer MLP 的隐藏层倍率。
    :param msconv_kernels: 多尺度卷积分支的核尺寸，均为奇数。
    :param local_kernels: ILGFN 局部路径的核尺寸 n。
    :param rdscb_repeat: RDSCB 内深度可分离卷积的重复次数 m。
    :param cbam_reduction: CBAM 通道注意力的压缩比 r。
    :param gn_groups: GroupNorm 分组数。
    :param leaky_slope: LeakyReLU 负半轴斜率。
    """

    channels: int = 16
    window_size: int = 8
    heads: int = 2
    mlp_ratio: float = 2.0
    msconv_kernels: tuple[int, ...] = (1, 3, 5, 7)
    local_kernels: tuple[int, ...] = (3, 5, 7)
    rdscb_repeat: int = 2
    cbam_reduction: int = 8
    gn_groups: int = 4
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        positives = {
            "channels": self.channels,
            "window_size": self.window_size,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "rdscb_repeat": self.rdscb_repeat,
            "cbam_reduction": self.cbam_reduction,
            "gn_groups": self.gn_groups,
            "leaky_slope": self.leaky_slope,
        }
        for name, value in positives.items():
            if value <= 0:
                raise InvalidInputError(f"{name} 必须为正数: {value}")
        for kernel in (*self.msconv_kernels, *self.local_kernels):
            if kernel <= 0 or kernel % 2 == 0:
                raise InvalidInputError(f"卷积核尺寸必须为正奇数: {kernel}")
        if self.channels % self.heads:
            raise InvalidInputError(f"channels={self.channels} 不能被 heads={self.heads} 整除")
        if self.channels % len(self.msconv_kernels):
            raise InvalidInputError(
                f"channels={self.channels} 不能被多尺度分支数 {len(self.msconv_kernels)} 整除"
            )
        if self.channels % self.gn_groups:
            raise InvalidInputError(f"channels={self.channels} 不能被 gn_groups={self.gn_groups} 整除")
        if self.channels < 2:
            raise InvalidInputError("channels 至少为 2")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any] | None) -> "BlockConfig":
        return _section_from_mapping(cls, mapping, "blocks")

    def to_mapping(self) -> dict[str, Any]:
        return _to_plain(asdict(self))


@dataclass(frozen=True, slots=True)
class LossWeights:
    """
    损失权重与消融开关。默认值 λ=(1, 100, 1)、γ=(1, 5)、ε=1e-6。

    :param tv_on_infrared: 额外对增强红外图施加全变分项，默认关闭。
    """

    lambda1: float = 1.0
    lambda2: float = 100.0
    lambda3: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 5.0
    epsilon: float = 1e-6
    use_ds: bool = True
    use_text: bool = True
    tv_on_infrared: bool = False

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "gamma1", "gamma2"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} 不能为负: {getattr(self, name)}")
        if self.epsilon <= 0:
            raise InvalidInputError(f"epsilon 必须为正: {self.epsilon}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any] | None) -> "LossWeights":
        return _section_from_mapping(cls, mapping, "loss")

    def to_mapping(self) -> dict[str, Any]:
        return _to_plain(asdict(self))


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """
    两阶段训练的标量超参数。

    :param crop_size: 随机裁剪边长，需被窗口尺寸整除。
    :param sigma_range: 高斯噪声 σ 的均匀采样区间（0–255 刻度）。
    :param stripe_range: 条纹幅度的均匀采样区间（0–255 刻度）。
    :param degradation_mode: ``both`` / ``gaussian`` / ``stripe`` / ``mixed``。
    :param darken_gamma: 可见光暗化增广的幂次，``1`` 表示关闭。
    :param ablation: ``none`` / ``no_ddon`` / ``no_ilgfn``。
    """

    crop_size: int = 128
    batch_size: int = 16
    learning_rate: float = 1e-3
    stage1_steps: int = 300
    stage2_steps: int = 300
    sigma_range: tuple[float, ...] = (5.0, 30.0)
    stripe_range: tuple[float, ...] = (10.0, 30.0)
    stripe_orientation: Orientation = "vertical"
    degradation_mode: DegradationMode = "both"
    darken_gamma: float = 1.0
    tau: float = 0.25
    retinex_sigma: float = 15.0
    seed: int = 0
    perceptual_seed: int = 0
    ablation: Ablation = "none"
    log_every: int = 10

    def __post_init__(self) -> None:
        if self.crop_size < 8:
            raise InvalidInputError(f"crop_size 至少为 8: {self.crop_size}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size 至少为 1: {self.batch_size}")
        if self.learning_rate <= 0:
            raise InvalidInputError(f"learning_rate 必须为正: {self.learning_rate}")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise InvalidInputError("训练步数不能为负")
        for name in ("sigma_range", "stripe_range"):
            bounds = getattr(self, name)
            if len(bounds) != 2 or not 0.0 <= bounds[0] < bounds[1] <= 30.0:
                raise InvalidInputError(f"{name} 需为 [lo, hi] 且 0 ≤ lo < hi ≤ 30: {bounds}")
        if self.stripe_orientation not in ORIENTATIONS:
            raise InvalidInputError(f"stripe_orientation 仅支持 {ORIENTATIONS}")
        if self.degradation_mode not in DEGRADATION_MODES:
            raise InvalidInputError(f"degradation_mode 仅支持 {DEGRADATION_MODES}")
        if self.ablation not in ABLATIONS:
            raise InvalidInputError(f"ablation 仅支持 {ABLATIONS}")
        if self.darken_gamma < 1.0:
            raise InvalidInputError(f"darken_gamma 必须 ≥ 1: {self.darken_gamma}")
        if not 0.0 <= self.tau <= 2.0:
            raise InvalidInputError(f"tau 超出 [0, 2]: {self.tau}")
        if self.retinex_sigma <= 0:
            raise InvalidInputError(f"retinex_sigma 必须为正: {self.retinex_sigma}")
        if self.log_every < 1:
            raise InvalidInputError(f"log_every 至少为 1: {self.log_every}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any] | None) -> "TrainConfig":
        return _section_from_mapping(cls, mapping, "train")

    def to_mapping(self) -> dict[str, Any]:
        return _to_plain(asdict(self))


@dataclass(frozen=True, slots=True)
class PathsConfig:
    """
    :param data_dir: 训练数据根目录，包含同名配对的 ``ir/`` 与 ``vi/``。
    :param work_dir: 检查点、训练日志与运行日志的输出目录。
    """

    data_dir: str = "data/train"
    work_dir: str = "runs/default"

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any] | None) -> "PathsConfig":
        return _section_from_mapping(cls, mapping, "paths")

    def to_mapping(self) -> dict[str, Any]:
        return _to_plain(asdict(self))


@dataclass(frozen=True, slots=True)
class ProjectConfig:
    """
    完整的项目配置，对应 ``ddfusion.config.toml`` 的全部内容。
    """

    version: int = CONFIG_VERSION
    paths: PathsConfig = field(default_factory=PathsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    blocks: BlockConfig = field(default_factory=BlockConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)

    def __post_init__(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"不支持的配置版本 {self.version}，当前版本为 {CONFIG_VERSION}")
        if self.train.crop_size % self.blocks.window_size:
            raise ConfigError(
                f"crop_size={self.train.crop_size} 不能被 window_size={self.blocks.window_size} 整除"
            )

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any] | None) -> "ProjectConfig":
        """
        从普通字典（例如 ``tomlkit`` 文档 ``unwrap()`` 的结果）构造配置。

        :param mapping: 顶层映射。
        :type mapping: Mapping[str, Any] | None
        :returns: 校验后的配置。
        :rtype: ProjectConfig
        :raises ConfigError: 出现未知键、版本不符或取值非法时。
        """

        mapping = dict(mapping or {})
        sections = {"version", "paths", "train", "blocks", "loss", "degradation"}
        unknown = sorted(set(mapping) - sections)
        if unknown:
            raise ConfigError(f"存在未知配置节: {', '.join(unknown)}")
        version = mapping.get("version", CONFIG_VERSION)
        if isinstance(version, bool) or not isinstance(version, int):
            raise ConfigError(f"version 需要整数，实际为 {version!r}")
        return cls(
            version=version,
            paths=PathsConfig.from_mapping(mapping.get("paths")),
            train=TrainConfig.from_mapping(mapping.get("train")),
            blocks=BlockConfig.from_mapping(mapping.get("blocks")),
            loss=LossWeights.from_mapping(mapping.get("loss")),
            degradation=DegradationSpec.from_mapping(mapping.get("degradation")),
        )

    def to_mapping(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "paths": self.paths.to_mapping(),
            "train": self.train.to_mapping(),
            "blocks": self.blocks.to_mapping(),
            "loss": self.loss.to_mapping(),
            "degradation": self.degradation.to_mapping(),
        }

    def digest(self) -> bytes:
        """
        配置的 SHA-256 摘要（规范化 JSON），写入检查点头部。

        :returns: 32 字节摘要。
        :rtype: bytes
        """

        canonical = json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()
