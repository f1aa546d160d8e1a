#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
玩具级基础分割网络
几层保持分辨率的空洞卷积作为主干，输出共享特征；
粗分类头、精细分类头和从中间层引出的辅助头都是 1×1 卷积
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import tensor_core as tc
from cdgc_errors import ConfigError, DimensionError
from tensor_core import ParamStore, Rng, Tensor

logger = logging.getLogger(__name__)


@dataclass
class ConvSpec:
    """主干中的一层卷积"""
    channels: int
    kernel: int = 3
    dilation: int = 1

    @property
    def padding(self) -> int:
        # 保持空间尺寸
        return self.dilation * (self.kernel - 1) // 2


def default_trunk(feature_channels: int = 16, dilations=(1, 1, 2, 4)) -> List[ConvSpec]:
    return [ConvSpec(feature_channels, 3, d) for d in dilations]


@dataclass
class BasicNetConfig:
    in_channels: int = 3
    feature_channels: int = 16
    num_classes: int = 3
    trunk: List[ConvSpec] = field(default_factory=default_trunk)
    aux_tap: int = 2

    def __post_init__(self):
        if not self.trunk:
            raise ConfigError("主干至少需要一层卷积")
        if not 0 <= self.aux_tap < len(self.trunk):
            raise ConfigError(f"aux_tap={self.aux_tap} 超出主干层数 {len(self.trunk)}")
        if self.trunk[-1].channels != self.feature_channels:
            raise ConfigError(
                f"主干最后一层通道数 {self.trunk[-1].channels} 必须等于特征通道数 {self.feature_channels}")
        for i, spec in enumerate(self.trunk):
            if spec.kernel % 2 == 0 or spec.dilation < 1:
                raise ConfigError(f"第 {i} 层卷积配置不合法: {spec}（卷积核必须为奇数，空洞率 ≥ 1）")
        if self.num_classes < 2:
            raise ConfigError(f"类别数必须 ≥ 2，当前 {self.num_classes}")


class BasicNet:
    """基础网络：主干 + 三个 1×1 分类头"""

    PREFIX = "net"

    def __init__(self, cfg: BasicNetConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: BasicNetConfig, params: ParamStore, rng: Rng) -> "BasicNet":
        in_ch = cfg.in_channels
        for i, spec in enumerate(cfg.trunk):
            k = spec.kernel
            params.add(f"{cls.PREFIX}.trunk.{i}.weight",
                       tc.xavier_uniform((spec.channels, in_ch, k, k), in_ch * k * k, spec.channels * k * k, rng))
            params.add(f"{cls.PREFIX}.trunk.{i}.bias", tc.zeros((spec.channels,)))
            in_ch = spec.channels
        c, m = cfg.feature_channels, cfg.num_classes
        aux_ch = cfg.trunk[cfg.aux_tap].channels
        for head, head_in in (("coarse", c), ("refined", c), ("aux", aux_ch)):
            params.add(f"{cls.PREFIX}.{head}.weight", tc.xavier_uniform((m, head_in, 1, 1), head_in, m, rng))
            params.add(f"{cls.PREFIX}.{head}.bias", tc.zeros((m,)))
        return cls(cfg, params)

    def forward_trunk(self, image: Tensor) -> Tuple[Tensor, Tensor]:
        """主干前向，返回 (最终特征 C×H×W, aux_tap 层的激活)"""
        if image.ndim != 3 or image.shape[0] != self.cfg.in_channels:
            raise DimensionError(f"输入图像形状 {image.shape} 与 in_channels={self.cfg.in_channels} 不符")
        x = image
        aux_feature = None
        for i, spec in enumerate(self.cfg.trunk):
            out = tc.conv2d(x, self.params[f"{self.PREFIX}.trunk.{i}.weight"],
                            dilation=spec.dilation, padding=spec.padding)
            if out.shape[1:] != image.shape[1:]:
                raise ConfigError(f"第 {i} 层卷积改变了空间尺寸: {image.shape[1:]} → {out.shape[1:]}")
            x = tc.relu(tc.add_channel_bias(out, self.params[f"{self.PREFIX}.trunk.{i}.bias"]))
            if i == self.cfg.aux_tap:
                aux_feature = x
        return x, aux_feature

    def _head(self, name: str, feature: Tensor) -> Tensor:
        logits = tc.conv2d(feature, self.params[f"{self.PREFIX}.{name}.weight"])
        return tc.add_channel_bias(logits, self.params[f"{self.PREFIX}.{name}.bias"])

    def coarse_head(self, feature: Tensor) -> Tensor:
        """粗预测 logits M×H×W"""
        return self._head("coarse", feature)

    def refined_head(self, fused: Tensor) -> Tensor:
        """精细预测 logits M×H×W"""
        return self._head("refined", fused)

    def aux_head(self, aux_feature: Tensor) -> Tensor:
        """辅助预测 logits M×H×W"""
        return self._head("aux", aux_feature)
