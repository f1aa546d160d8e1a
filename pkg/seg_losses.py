#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
分割损失
粗预测与辅助预测用交叉熵，精细预测用 OHEM，三者按权重加权求和
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

import tensor_core as tc
from cdgc_errors import ConfigError, DataError, DimensionError, UsageError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255


@dataclass
class LossWeights:
    """粗预测、精细预测、辅助预测三项损失的权重"""
    alpha: float = 0.6
    beta: float = 0.7
    gamma: float = 0.4

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError(f"损失权重必须非负: {self}")


@dataclass
class OhemConfig:
    threshold: float = 0.7
    # None 表示 ceil(有效像素数 / 16)
    min_kept: Optional[int] = None


def _valid_pixels(logits: Tensor, labels: np.ndarray, ignore_index: int):
    labels = np.asarray(labels)
    if logits.ndim != 3 or labels.shape != logits.shape[1:]:
        raise DimensionError(f"logits {logits.shape} 与标签 {labels.shape} 形状不匹配")
    valid = labels != ignore_index
    if not np.any(valid):
        raise DataError("所有像素都被忽略，损失无定义")
    num_classes = logits.shape[0]
    if np.any((labels[valid] < 0) | (labels[valid] >= num_classes)):
        raise DataError(f"标签超出类别范围 0..{num_classes - 1}（忽略值 {ignore_index}）")
    rows, cols = np.nonzero(valid)
    return labels, rows, cols


def _weighted_nll(log_probs: Tensor, labels: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """-Σ log p[label] / 像素数，只对给定像素求平均"""
    weights = np.zeros(log_probs.shape, dtype=log_probs.dtype)
    weights[labels[rows, cols], rows, cols] = 1.0 / rows.size
    return tc.neg(tc.sum(tc.mul(log_probs, Tensor(weights, dtype=weights.dtype))))


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """非忽略像素上的平均交叉熵，log-sum-exp 先减最大值"""
    labels, rows, cols = _valid_pixels(logits, labels, ignore_index)
    return _weighted_nll(tc.log_softmax(logits, axis=0), labels, rows, cols)


def ohem_loss(logits: Tensor, labels: np.ndarray, threshold: float = 0.7,
              min_kept: Optional[int] = None, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """在线难例挖掘交叉熵

    保留真值类别概率低于 threshold 的像素；不足 min_kept 个时改为保留概率最低的
    min_kept 个像素。被丢弃的像素梯度为零。
    """
    if not 0.0 < threshold <= 1.0:
        raise UsageError(f"OHEM 阈值 {threshold} 不在 (0, 1]")
    labels, rows, cols = _valid_pixels(logits, labels, ignore_index)
    num_valid = rows.size
    if min_kept is None:
        min_kept = math.ceil(num_valid / 16)
    if not 1 <= min_kept <= num_valid:
        raise UsageError(f"min_kept={min_kept} 不在 [1, {num_valid}]")

    log_probs = tc.log_softmax(logits, axis=0)
    true_prob = np.exp(log_probs.data[labels[rows, cols], rows, cols])
    kept = np.flatnonzero(true_prob < threshold)
    if kept.size < min_kept:
        logger.debug(f"OHEM 仅 {kept.size} 个像素低于阈值 {threshold}，改为保留最难的 {min_kept} 个")
        kept = np.sort(np.argsort(true_prob, kind="stable")[:min_kept])
    return _weighted_nll(log_probs, labels, rows[kept], cols[kept])


def total_loss(l_c: Tensor, l_f: Optional[Tensor], l_a: Tensor, weights: LossWeights) -> Tensor:
    """L = α·l_c + β·l_f + γ·l_a；没有精细分支时省略 l_f"""
    total = tc.add(tc.scale(l_c, weights.alpha), tc.scale(l_a, weights.gamma))
    if l_f is not None:
        total = tc.add(total, tc.scale(l_f, weights.beta))
    return total
