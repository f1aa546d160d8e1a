#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
由粗到细的分割流水线
基础网络 → 粗预测 → 类别掩码 → CDGC → 融合 → 精细预测，
并解析实验变体（none / plain-gcn / class-sim / class-ds:<ratio>）
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from basic_net import BasicNet, BasicNetConfig
from cdgc_errors import ConfigError
from cdgc_module import CdgcConfig, CdgcModule, RefinedFeature
from graph_builder import (ClassMasks, SampledSet, class_masks_from_logits, dynamic_sample,
                           inference_sample)
from tensor_core import ParamStore, Rng, Tensor

logger = logging.getLogger(__name__)

VARIANT_KINDS = ("none", "plain-gcn", "class-sim", "class-ds")

# 难样本组成：简单正样本（ep）加难正样本（hp）和/或难负样本（hn）
SAMPLE_PARTS = {
    "": (True, True),
    "ep": (False, False),
    "ep+hp": (True, False),
    "ep+hn": (False, True),
}


@dataclass(frozen=True)
class Variant:
    """实验变体"""
    kind: str
    ratio: float = 1.0
    hard_positive: bool = True
    hard_negative: bool = True

    @property
    def name(self) -> str:
        if self.kind != "class-ds":
            return self.kind
        name = f"class-ds:{float(self.ratio)!r}"
        for suffix, flags in SAMPLE_PARTS.items():
            if suffix and flags == (self.hard_positive, self.hard_negative):
                name += f":{suffix}"
        return name


def parse_variant(text: str, default_ratio: float = 1.0) -> Variant:
    """解析变体字符串，例如 class-ds:0.8 或 class-ds:1.0:ep+hp"""
    parts = text.strip().split(":")
    kind = parts[0]
    if kind not in VARIANT_KINDS:
        raise ConfigError(f"未知变体: {text}（可选 {', '.join(VARIANT_KINDS)}）")
    if kind != "class-ds":
        if len(parts) > 1:
            raise ConfigError(f"变体 {kind} 不接受参数: {text}")
        return Variant(kind)
    ratio = default_ratio
    if len(parts) > 1 and parts[1]:
        try:
            ratio = float(parts[1])
        except ValueError:
            raise ConfigError(f"采样比例不是数字: {text}")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"采样比例 {ratio} 不在 [0, 1]: {text}")
    suffix = parts[2] if len(parts) > 2 else ""
    if suffix not in SAMPLE_PARTS or len(parts) > 3:
        raise ConfigError(f"未知的样本组成: {text}（可选 ep / ep+hp / ep+hn）")
    hard_positive, hard_negative = SAMPLE_PARTS[suffix]
    return Variant(kind, ratio, hard_positive, hard_negative)


@dataclass
class PipelineOutput:
    feature: Tensor
    coarse_logits: Tensor
    aux_logits: Tensor
    refined_logits: Optional[Tensor] = None
    refined: Optional[RefinedFeature] = None
    sampled: Optional[SampledSet] = None


class CdgcNet:
    """基础网络 + CDGC 模块，共享同一个参数存储"""

    def __init__(self, net: BasicNet, cdgc: CdgcModule, variant: Variant, params: ParamStore):
        self.net = net
        self.cdgc = cdgc
        self.variant = variant
        self.params = params

    @classmethod
    def build(cls, net_cfg: BasicNetConfig, fusion: str, variant: Variant, seed: int) -> "CdgcNet":
        """按种子初始化全部参数"""
        params = ParamStore()
        net_rng, cdgc_rng = Rng(seed).split(2)
        net = BasicNet.initialize(net_cfg, params, net_rng)
        cdgc_cfg = CdgcConfig(net_cfg.num_classes, net_cfg.feature_channels, fusion)
        cdgc = CdgcModule.initialize(cdgc_cfg, params, cdgc_rng)
        logger.info(f"模型已初始化: 变体 {variant.name}, 融合 {fusion}, 参数量 {params.num_values()}")
        return cls(net, cdgc, variant, params)

    @property
    def num_classes(self) -> int:
        return self.net.cfg.num_classes

    def sample_nodes(self, coarse_logits: Tensor, labels: Optional[np.ndarray],
                     rng: Optional[Rng], training: bool, ignore_index: int = 255) -> SampledSet:
        """训练时 class-ds 用动态采样，其余情况用粗预测掩码"""
        coarse = class_masks_from_logits(coarse_logits)
        if training and self.variant.kind == "class-ds":
            if labels is None or rng is None:
                raise ConfigError("动态采样需要真值标签和随机数发生器")
            gt = ClassMasks.from_labels(labels, self.num_classes, ignore_index)
            sampled = dynamic_sample(coarse, gt, self.variant.ratio, rng,
                                     self.variant.hard_positive, self.variant.hard_negative)
            logger.debug(f"动态采样节点数: {sampled.sizes()}")
            return sampled
        return inference_sample(coarse)

    def forward(self, image: Tensor, labels: Optional[np.ndarray] = None, rng: Optional[Rng] = None,
                training: bool = False, sampled: Optional[SampledSet] = None,
                ignore_index: int = 255, refine: bool = True) -> PipelineOutput:
        """完整前向；给定 sampled 时直接使用，不再重新采样

        refine=False 时只跑主干与粗预测、辅助头（预热阶段）。
        """
        feature, aux_feature = self.net.forward_trunk(image)
        coarse_logits = self.net.coarse_head(feature)
        out = PipelineOutput(feature, coarse_logits, self.net.aux_head(aux_feature))
        if self.variant.kind == "none" or not refine:
            return out
        if self.variant.kind == "plain-gcn":
            out.refined = self.cdgc.forward_plain(feature)
        else:
            if sampled is None:
                sampled = self.sample_nodes(coarse_logits, labels, rng, training, ignore_index)
            out.sampled = sampled
            out.refined = self.cdgc.forward(feature, sampled)
        out.refined_logits = self.net.refined_head(out.refined.fused)
        return out
