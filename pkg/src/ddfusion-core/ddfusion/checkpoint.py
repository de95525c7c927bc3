"""
ddfusion.checkpoint
===================

带版本的二进制检查点。布局（整数均为小端）::

    b"DDFU" | u32 格式版本 | 32 字节配置摘要
    u32 元数据长度 | 元数据 JSON（配置快照、阶段、步数）
    u32 段数 | 逐段: u16 名称长度, 名称, u8 维数, 维数 × u32 形状, float32 小端数据
    32 字节内容摘要（SHA-256，覆盖之前的全部字节）

模型参数段以 ``ddon.`` / ``ilgfn.`` 开头，Adam 状态段以 ``optim.`` 开头。
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from loguru import logger
from torch import nn

from .errors import CheckpointError, ConfigError
from .models import ProjectConfig

MAGIC = b"DDFU"
FORMAT_VERSION = 1
_DIGEST_SIZE = 32
_ADAM_KEYS = ("step", "exp_avg", "exp_avg_sq")


def _to_float32(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().to(torch.float32).contiguous().numpy().copy()


def parameter_digest(module: nn.Module) -> str:
    """模块全部参数按名称排序后 float32 字节的 SHA-256。"""

    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters(), key=lambda item: item[0]):
        digest.update(name.encode("utf-8"))
        digest.update(_to_float32(param).astype("<f4").tobytes())
    return digest.hexdigest()


@dataclass
class Checkpoint:
    """
    :param config: 生成该检查点时的配置快照。
    :param segments: 段名到 float32 数组的映射。
    :param stage: 产生该检查点的训练阶段（1 或 2）。
    :param steps: 各阶段已完成的步数，键为 ``stage1`` / ``stage2``。
    """

    config: ProjectConfig
    segments: dict[str, np.ndarray] = field(default_factory=dict)
    stage: int = 1
    steps: dict[str, int] = field(default_factory=lambda: {"stage1": 0, "stage2": 0})
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(
        cls,
        model: nn.Module,
        config: ProjectConfig,
        stage: int,
        steps: dict[str, int],
        optimizer: torch.optim.Optimizer | None = None,
    ) -> "Checkpoint":
        """
        从模型（及可选的 Adam 优化器）采集全部段。

        :param model: ``DDFusion`` 模型。
        :type model: torch.nn.Module
        :param config: 配置快照。
        :type config: ProjectConfig
        :param stage: 训练阶段。
        :type stage: int
        :param steps: 各阶段步数。
        :type steps: dict[str, int]
        :param optimizer: 需要一并保存状态的优化器。
        :type optimizer: torch.optim.Optimizer | None
        :returns: 检查点对象。
        :rtype: Checkpoint
        """

        segments = {name: _to_float32(p) for name, p in model.named_parameters()}
        if optimizer is not None:
            for name, param in model.named_parameters():
                state = optimizer.state.get(param)
                if not state:
                    continue
                for key in _ADAM_KEYS:
                    value = state[key]
                    tensor = value if torch.is_tensor(value) else torch.tensor(float(value))
                    segments[f"optim.{name}.{key}"] = _to_float32(tensor)
        return cls(config=config, segments=segments, stage=stage, steps=dict(steps))

    def segment_names(self, prefix: str) -> list[str]:
        head = prefix.rstrip(".") + "."
        return sorted(name for name in self.segments if name.startswith(head))

    def segment_digest(self, prefix: str) -> str:
        """
        指定前缀（如 ``ddon``）下全部段的 SHA-256，与 ``parameter_digest`` 使用同一算法。
        """

        head = prefix.rstrip(".") + "."
        digest = hashlib.sha256()
        for name in self.segment_names(prefix):
            digest.update(name[len(head):].encode("utf-8"))
            digest.update(self.segments[name].astype("<f4").tobytes())
        return digest.hexdigest()

    def state_dict(self, prefix: str | None = None) -> dict[str, torch.Tensor]:
        """模型参数段（不含 ``optim.``），可选只取某个子网络。"""

        names = [n for n in self.segments if not n.startswith("optim.")]
        if prefix is not None:
            names = [n for n in names if n.startswith(prefix.rstrip(".") + ".")]
        return {name: torch.from_numpy(self.segments[name].copy()) for name in names}

    def load_into(self, model: nn.Module, prefix: str | None = None) -> None:
        """
        把参数写回模型；给出 ``prefix`` 时只加载该子网络。

        :raises CheckpointError: 段与模型参数名称或形状不一致时。
        """

        state = self.state_dict(prefix)
        params = dict(model.named_parameters())
        expected = set(params) if prefix is None else {n for n in params if n.startswith(prefix.rstrip(".") + ".")}
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise CheckpointError(
                f"检查点与模型结构不匹配 missing={missing[:5]} unexpected={unexpected[:5]}"
            )
        with torch.no_grad():
            for name, value in state.items():
                target = params[name]
                if tuple(target.shape) != tuple(value.shape):
                    raise CheckpointError(f"段 {name} 形状不匹配: {tuple(value.shape)} vs {tuple(target.shape)}")
                target.copy_(value.to(dtype=target.dtype, device=target.device))

    def restore_optimizer(self, optimizer: torch.optim.Optimizer, model: nn.Module) -> int:
        """
        恢复 Adam 的一阶/二阶矩与步数。

        :returns: 恢复了状态的参数个数。
        :rtype: int
        """

        restored = 0
        for name, param in model.named_parameters():
            keys = [f"optim.{name}.{key}" for key in _ADAM_KEYS]
            if not all(k in self.segments for k in keys):
                continue
            step, exp_avg, exp_avg_sq = (torch.from_numpy(self.segments[k].copy()) for k in keys)
            optimizer.state[param] = {
                "step": step.reshape(()).to(torch.float32),
                "exp_avg": exp_avg.to(dtype=param.dtype, device=param.device),
                "exp_avg_sq": exp_avg_sq.to(dtype=param.dtype, device=param.device),
            }
            restored += 1
        return restored

    def _metadata(self) -> dict[str, Any]:
        return {"config": self.config.to_mapping(), "stage": self.stage, "steps": self.steps}

    def to_bytes(self) -> bytes:
        meta = json.dumps(self._metadata(), sort_keys=True).encode("utf-8")
        parts = [
            MAGIC,
            struct.pack("<I", self.version),
            self.config.digest(),
            struct.pack("<I", len(meta)),
            meta,
            struct.pack("<I", len(self.segments)),
        ]
        for name in sorted(self.segments):
            array = np.ascontiguousarray(self.segments[name], dtype="<f4")
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<B", array.ndim))
            parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
            parts.append(array.tobytes())
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        logger.info("checkpoint saved path=[{}] stage=[{}] segments=[{}]", path, self.stage, len(self.segments))
        return path

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        """
        解析并校验检查点字节流。

        :raises CheckpointError: 魔数、版本、摘要或结构不合法时。
        """

        if len(data) < 4 + 4 + _DIGEST_SIZE + _DIGEST_SIZE or data[:4] != MAGIC:
            raise CheckpointError(f"不是 DDFU 检查点: {source}")
        body, content_digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
        if hashlib.sha256(body).digest() != content_digest:
            raise CheckpointError(f"检查点内容摘要校验失败: {source}")
        try:
            offset = 4
            (version,) = struct.unpack_from("<I", body, offset)
            offset += 4
            if version != FORMAT_VERSION:
                raise CheckpointError(f"不支持的检查点版本 {version}: {source}")
            config_digest = body[offset : offset + _DIGEST_SIZE]
            offset += _DIGEST_SIZE
            (meta_len,) = struct.unpack_from("<I", body, offset)
            offset += 4
            meta = json.loads(body[offset : offset + meta_len].decode("utf-8"))
            offset += meta_len
            (count,) = struct.unpack_from("<I", body, offset)
            offset += 4
            segments: dict[str, np.ndarray] = {}
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", body, offset)
                offset += 2
                name = body[offset : offset + name_len].decode("utf-8")
                offset += name_len
                (ndim,) = struct.unpack_from("<B", body, offset)
                offset += 1
                shape = struct.unpack_from(f"<{ndim}I", body, offset)
                offset += 4 * ndim
                size = int(np.prod(shape, dtype=np.int64))
                array = np.frombuffer(body, dtype="<f4", count=size, offset=offset).reshape(shape)
                offset += 4 * size
                segments[name] = array.astype(np.float32)
            if offset != len(body):
                raise CheckpointError(f"检查点尾部存在多余字节: {source}")
        except (struct.error, ValueError) as error:
            raise CheckpointError(f"检查点结构损坏 {source}: {error}") from error
        try:
            config = ProjectConfig.from_mapping(meta["config"])
        except (ConfigError, KeyError) as error:
            raise CheckpointError(f"检查点中的配置快照无效 {source}: {error}") from error
        if config.digest() != config_digest:
            raise CheckpointError(f"检查点配置摘要与快照不一致: {source}")
        return cls(
            config=config,
            segments=segments,
            stage=int(meta.get("stage", 1)),
            steps={k: int(v) for k, v in meta.get("steps", {}).items()},
            version=version,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"检查点不存在: {path}")
        return cls.from_bytes(path.read_bytes(), str(path))
