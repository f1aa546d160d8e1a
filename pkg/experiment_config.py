#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
实验配置
平铺的 YAML 键值或 key=value 文本，读入 ExperimentConfig，并派生网络、训练与损失的配置对象；
同时负责根日志的初始化
"""

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Union

import yaml

from basic_net import BasicNetConfig, ConvSpec
from cdgc_errors import ConfigError
from cdgc_module import FUSION_MODES
from cdgc_network import Variant, parse_variant
from graph_builder import sample_count
from seg_losses import LossWeights, OhemConfig
from seg_trainer import TrainConfig

logger = logging.getLogger(__name__)

SWEEP_VARIANTS = ["none", "plain-gcn", "class-sim",
                  "class-ds:0.2", "class-ds:0.4", "class-ds:0.6", "class-ds:0.8", "class-ds:1.0"]


@dataclass
class ExperimentConfig:
    """一次实验的全部参数，默认值即桌面规模的默认配置"""
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    variants: List[str] = field(default_factory=lambda: ["none", "plain-gcn", "class-sim", "class-ds:1.0"])
    fusion: str = "concat"
    ratio: float = 1.0

    # 数据
    height: int = 32
    width: int = 32
    num_classes: int = 3
    train_samples: int = 500
    eval_samples: int = 100
    noise: float = 0.1
    data_seed: int = 1234

    # 网络
    in_channels: int = 3
    feature_channels: int = 16
    trunk_dilations: List[int] = field(default_factory=lambda: [1, 1, 2, 4])
    aux_tap: int = 2

    # 训练
    steps: int = 2000
    # 预热步数占总步数的比例，预热期间不训练精细分支
    warmup_fraction: float = 0.2
    lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0005
    alpha: float = 0.6
    beta: float = 0.7
    gamma: float = 0.4
    ohem_threshold: float = 0.7
    ohem_min_kept: Optional[int] = None
    ignore_index: int = 255
    log_every: int = 100

    # 输出与日志
    out_dir: str = "runs"
    log_level: str = "INFO"
    log_file: Optional[str] = "cdgc_bench.log"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"未知融合方式: {self.fusion}（可选 concat / sum）")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"ratio={self.ratio} 不在 [0, 1]")
        if self.steps < 0 or self.train_samples < 1 or self.eval_samples < 1:
            raise ConfigError(f"steps / train_samples / eval_samples 不合法: "
                              f"{self.steps} / {self.train_samples} / {self.eval_samples}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction={self.warmup_fraction} 不在 [0, 1)")
        if not self.trunk_dilations:
            raise ConfigError("trunk_dilations 不能为空")
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"未知日志级别: {self.log_level}")
        for text in self.variants:
            parse_variant(text, self.ratio)

    # ---- 派生配置 ----
    def net_config(self) -> BasicNetConfig:
        trunk = [ConvSpec(self.feature_channels, 3, int(d)) for d in self.trunk_dilations]
        return BasicNetConfig(self.in_channels, self.feature_channels, self.num_classes, trunk, self.aux_tap)

    def warmup_steps(self) -> int:
        return sample_count(self.warmup_fraction, self.steps)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, warmup_steps=self.warmup_steps(), lr=self.lr, power=self.power,
                           momentum=self.momentum, weight_decay=self.weight_decay, weights=self.loss_weights(),
                           ohem=OhemConfig(self.ohem_threshold, self.ohem_min_kept),
                           ignore_index=self.ignore_index, log_every=self.log_every)

    def variant_list(self) -> List[Variant]:
        return [parse_variant(text, self.ratio) for text in self.variants]

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """命令行参数覆盖配置；值为 None 的项忽略"""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def config_keys() -> List[str]:
    return [f.name for f in fields(ExperimentConfig)]


def parse_key_value_lines(text: str, source: Union[str, Path] = "<text>") -> dict:
    """解析 key=value 行，值按 YAML 标量解析，无法解析时保留原文；# 开头的行与空行忽略"""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: 需要 key=value 格式: {line}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: 配置项重复: {key}")
        value = value.strip()
        try:
            raw[key] = yaml.safe_load(value) if value else None
        except yaml.YAMLError:
            logger.debug(f"{source}:{lineno}: {key} 的值按字符串处理")
            raw[key] = value
    return raw


def _looks_like_key_value(text: str) -> bool:
    lines = [l.strip() for l in text.splitlines() if l.strip() and not l.strip().startswith("#")]
    return bool(lines) and all("=" in l and ":" not in l.partition("=")[0] for l in lines)


def load_config(config_path: Optional[Union[str, Path]]) -> ExperimentConfig:
    """加载配置文件；未给出路径时使用默认配置

    支持平铺的 YAML 映射，也支持每行一个 key=value 的文本。
    """
    if config_path is None:
        return ExperimentConfig()
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    text = path.read_text(encoding="utf-8")
    if _looks_like_key_value(text):
        raw = parse_key_value_lines(text, path)
    else:
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"配置文件解析失败: {path}: {e}")
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"配置文件必须是平铺的键值映射: {path}")
    unknown = sorted(set(raw) - set(config_keys()))
    if unknown:
        raise ConfigError(f"未知配置项: {', '.join(unknown)}")
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"配置项不允许嵌套: {', '.join(nested)}")
    try:
        return ExperimentConfig(**raw)
    except TypeError as e:
        raise ConfigError(f"配置项类型不正确: {e}")


def setup_logging(cfg: ExperimentConfig):
    """设置日志：文件 + 控制台"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if cfg.log_file:
        Path(cfg.log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(cfg.log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, cfg.log_level.upper()),
        format=cfg.log_format,
        handlers=handlers,
        force=True,
    )
