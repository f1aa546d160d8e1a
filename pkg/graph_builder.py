#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
类别图构建
由预测得到类别掩码，计算相似度图并按行 softmax 归一化，
训练阶段用粗预测与真值掩码做动态难样本采样
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

import tensor_core as tc
from cdgc_errors import ConfigError, DataError, DimensionError, EmptyClassError, UsageError
from tensor_core import Rng, Tensor

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255

# 浮点乘积的截断容差，0.7·90 应得 63 而不是 62
FLOOR_TOLERANCE = 1e-9


@dataclass
class ClassMasks:
    """每个类别一条长度为 N 的二值节点成员向量"""
    masks: np.ndarray  # M×N bool

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 2:
            raise DimensionError(f"ClassMasks 需要 M×N 数组，当前形状 {self.masks.shape}")

    @property
    def num_classes(self) -> int:
        return self.masks.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.masks.shape[1]

    def support(self, class_id: int) -> np.ndarray:
        """升序节点下标"""
        return np.flatnonzero(self.masks[class_id])

    def is_partition(self) -> bool:
        return bool(np.all(self.masks.sum(axis=0) == 1))

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int,
                    ignore_index: int = IGNORE_INDEX) -> "ClassMasks":
        """真值标签图转掩码，忽略像素不属于任何类别"""
        flat = np.asarray(labels).reshape(-1)
        valid = flat != ignore_index
        if np.any(valid & ((flat < 0) | (flat >= num_classes))):
            raise DataError(f"标签超出类别范围 0..{num_classes - 1}")
        masks = np.zeros((num_classes, flat.size), dtype=bool)
        masks[flat[valid], np.flatnonzero(valid)] = True
        return cls(masks)


@dataclass
class SampledSet:
    """每个类别参与图推理的节点下标集合

    readout 为 M×N 掩码时，类别 m 的图卷积输出只保留 readout[m] 内的节点，
    其余节点仍参与构图；为 None 时输出覆盖整个支撑集。
    """
    indices: List[np.ndarray]
    num_nodes: int
    ratio: float = 1.0
    readout: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.readout is not None:
            self.readout = np.asarray(self.readout, dtype=bool)
            if self.readout.shape != (len(self.indices), self.num_nodes):
                raise DimensionError(f"readout 形状 {self.readout.shape} 与 "
                                     f"{len(self.indices)}×{self.num_nodes} 不一致")

    @property
    def num_classes(self) -> int:
        return len(self.indices)

    def sizes(self) -> List[int]:
        return [len(s) for s in self.indices]

    def readout_mask(self, class_id: int) -> Optional[np.ndarray]:
        return None if self.readout is None else self.readout[class_id]


def sample_count(ratio: float, population: int) -> int:
    """floor(ratio·population)，容忍浮点乘积的微小下溢"""
    return min(population, math.floor(ratio * population + FLOOR_TOLERANCE))


@dataclass
class AdjacencyTensor:
    """M 个 N×N 行随机邻接矩阵"""
    matrices: List[Tensor] = field(default_factory=list)

    def to_numpy(self) -> np.ndarray:
        return np.stack([a.data for a in self.matrices])


def class_masks_from_logits(logits: Tensor) -> ClassMasks:
    """逐像素 argmax，平局取最小类别下标"""
    if logits.ndim != 3:
        raise DimensionError(f"logits 需要 M×H×W，当前形状 {logits.shape}")
    num_classes = logits.shape[0]
    if num_classes < 2:
        raise ConfigError(f"类别数必须 ≥ 2，当前 {num_classes}")
    winners = np.argmax(logits.data.reshape(num_classes, -1), axis=0)
    masks = np.zeros((num_classes, winners.size), dtype=bool)
    masks[winners, np.arange(winners.size)] = True
    return ClassMasks(masks)


def _support_mask(num_nodes: int, support: Sequence[int]) -> np.ndarray:
    mask = np.zeros(num_nodes, dtype=bool)
    mask[np.asarray(support, dtype=np.int64)] = True
    return mask


def similarity_scores(x_nodes: Tensor, w: Tensor, w_prime: Tensor, support: Sequence[int]) -> Tensor:
    """F[i][j] = (w·x_i)ᵀ(w'·x_j)，支撑集外的条目置零

    x_nodes 为 C×N，w / w_prime 为 C×C 可学习参数。
    """
    if len(support) == 0:
        raise EmptyClassError()
    if x_nodes.ndim != 2 or w.shape != (x_nodes.shape[0],) * 2 or w_prime.shape != w.shape:
        raise DimensionError(f"similarity_scores: 形状不匹配 x={x_nodes.shape}, w={w.shape}, w'={w_prime.shape}")
    num_nodes = x_nodes.shape[1]
    node_mask = _support_mask(num_nodes, support)
    phi = tc.matmul(w, x_nodes)
    phi_prime = tc.matmul(w_prime, x_nodes)
    scores = tc.matmul(tc.transpose(phi), phi_prime)
    pair_mask = np.outer(node_mask, node_mask).astype(scores.data.dtype)
    return tc.mul(scores, Tensor(pair_mask, dtype=pair_mask.dtype))


def row_softmax(scores: Tensor, support: Sequence[int]) -> Tensor:
    """只在支撑列上做行 softmax（先减行最大值），非支撑行全零"""
    if len(support) == 0:
        raise EmptyClassError()
    node_mask = _support_mask(scores.shape[0], support)
    return tc.masked_softmax(scores, np.outer(node_mask, node_mask))


def dynamic_sample(coarse: ClassMasks, gt: ClassMasks, ratio: float, rng: Rng,
                   hard_positive: bool = True, hard_negative: bool = True) -> SampledSet:
    """训练阶段的动态采样

    每个类别取全部难负样本 C\\G、全部难正样本 G\\C，再从 C∩G 中无放回均匀抽取
    floor(ratio·|C∩G|) 个简单正样本。hard_positive / hard_negative 用于难样本消融。

    真值只决定构图用的节点；输出范围（readout）取粗预测掩码，与推理时一致。
    """
    if not 0.0 <= ratio <= 1.0:
        raise UsageError(f"ratio={ratio} 不在 [0, 1]")
    if coarse.masks.shape != gt.masks.shape:
        raise DimensionError(f"粗预测掩码 {coarse.masks.shape} 与真值掩码 {gt.masks.shape} 不一致")

    indices = []
    for m in range(coarse.num_classes):
        c_mask, g_mask = coarse.masks[m], gt.masks[m]
        easy = np.flatnonzero(c_mask & g_mask)
        parts = [rng.sample_without_replacement(easy, sample_count(ratio, easy.size))]
        if hard_negative:
            parts.append(np.flatnonzero(c_mask & ~g_mask))
        if hard_positive:
            parts.append(np.flatnonzero(g_mask & ~c_mask))
        indices.append(np.sort(np.concatenate(parts)).astype(np.int64))
    logger.debug(f"动态采样 ratio={ratio}: 各类节点数 {[len(s) for s in indices]}")
    return SampledSet(indices=indices, num_nodes=coarse.num_nodes, ratio=ratio, readout=coarse.masks.copy())


def inference_sample(coarse: ClassMasks) -> SampledSet:
    """推理阶段：每个类别直接取粗预测掩码"""
    indices = [coarse.support(m).astype(np.int64) for m in range(coarse.num_classes)]
    return SampledSet(indices=indices, num_nodes=coarse.num_nodes, ratio=1.0)


def build_adjacency(x_nodes: Tensor, w: Tensor, w_prime: Tensor, sampled: SampledSet) -> AdjacencyTensor:
    """对所有类别构图；空类别得到全零矩阵"""
    num_nodes = x_nodes.shape[1]
    matrices = []
    for m in range(sampled.num_classes):
        support = sampled.indices[m]
        try:
            scores = similarity_scores(x_nodes, w, w_prime, support)
        except EmptyClassError:
            matrices.append(Tensor(np.zeros((num_nodes, num_nodes)), dtype=x_nodes.dtype))
            continue
        matrices.append(row_softmax(scores, support))
    return AdjacencyTensor(matrices)
