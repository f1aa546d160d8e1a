#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
类别动态图卷积（CDGC）模块
对每个类别的节点集合构图并做图卷积（按类别分组的权重），
再用 1×1 卷积聚合 M 个类别的特征，最后与输入特征融合
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

import tensor_core as tc
from cdgc_errors import ConfigError, DimensionError, EmptyClassError
from graph_builder import SampledSet, row_softmax, similarity_scores
from tensor_core import ParamStore, Rng, Tensor

logger = logging.getLogger(__name__)

FUSION_MODES = ("concat", "sum")


@dataclass
class CdgcConfig:
    """CDGC 模块超参数"""
    num_classes: int
    channels: int
    fusion: str = "concat"
    # 所有类别共用一个图卷积权重，目前未实现
    shared_group_weights: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"类别数必须 ≥ 2，当前 {self.num_classes}")
        if self.channels < 1:
            raise ConfigError(f"通道数必须 ≥ 1，当前 {self.channels}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"未知融合方式: {self.fusion}（可选 concat / sum）")
        if self.shared_group_weights:
            raise ConfigError("共享图卷积权重模式未实现")


@dataclass
class RefinedFeature:
    """CDGC 的中间与最终输出"""
    per_class: Optional[Tensor]  # M×C×N，plain-gcn 时为 None
    aggregated: Tensor           # C×H×W
    fused: Tensor                # C×H×W


class CdgcModule:
    """CDGC 模块：参数登记在共享的 ParamStore 中"""

    PREFIX = "cdgc"

    def __init__(self, cfg: CdgcConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: CdgcConfig, params: ParamStore, rng: Rng) -> "CdgcModule":
        c, m = cfg.channels, cfg.num_classes
        params.add(f"{cls.PREFIX}.sim_w", tc.xavier_uniform((c, c), c, c, rng))
        params.add(f"{cls.PREFIX}.sim_w_prime", tc.xavier_uniform((c, c), c, c, rng))
        for k in range(m):
            params.add(f"{cls.PREFIX}.group_w.{k}", tc.xavier_uniform((c, c), c, c, rng))
        params.add(f"{cls.PREFIX}.plain_w", tc.xavier_uniform((c, c), c, c, rng))
        params.add(f"{cls.PREFIX}.aggregation", tc.xavier_uniform((c, m * c, 1, 1), m * c, c, rng))
        fusion_in = 2 * c if cfg.fusion == "concat" else c
        params.add(f"{cls.PREFIX}.fusion", tc.xavier_uniform((c, fusion_in, 1, 1), fusion_in, c, rng))
        return cls(cfg, params)

    # ---- 参数访问 ----
    @property
    def sim_w(self) -> Tensor:
        return self.params[f"{self.PREFIX}.sim_w"]

    @property
    def sim_w_prime(self) -> Tensor:
        return self.params[f"{self.PREFIX}.sim_w_prime"]

    def group_weight(self, class_id: int) -> Tensor:
        return self.params[f"{self.PREFIX}.group_w.{class_id}"]

    @property
    def plain_weight(self) -> Tensor:
        return self.params[f"{self.PREFIX}.plain_w"]

    @property
    def aggregation_kernel(self) -> Tensor:
        return self.params[f"{self.PREFIX}.aggregation"]

    @property
    def fusion_kernel(self) -> Tensor:
        return self.params[f"{self.PREFIX}.fusion"]

    # ---- 前向 ----
    def forward(self, x: Tensor, sampled: SampledSet) -> RefinedFeature:
        """类别图推理 → 聚合 → 融合"""
        _, height, width = x.shape
        per_class = class_wise_reason(x, sampled, self)
        aggregated = aggregate_classes(per_class, self, height, width)
        return RefinedFeature(per_class, aggregated, fuse(x, aggregated, self))

    def forward_plain(self, x: Tensor) -> RefinedFeature:
        """plain-gcn 对照：所有节点一张图，不分类别"""
        refined = plain_reason(x, self)
        return RefinedFeature(None, refined, fuse(x, refined, self))


def graph_convolve(adjacency: Tensor, x_nodes: Tensor, weight: Tensor) -> Tensor:
    """Z = relu(A · X · W)，A: N×N，X: N×C，W: C×C"""
    n, c = x_nodes.shape
    if adjacency.shape != (n, n) or weight.shape != (c, c):
        raise DimensionError(
            f"graph_convolve: 形状不匹配 A={adjacency.shape}, X={x_nodes.shape}, W={weight.shape}")
    return tc.relu(tc.matmul(tc.matmul(adjacency, x_nodes), weight))


@dataclass
class ClassGraph:
    """单个类别在其支撑集上的图推理结果"""
    support: np.ndarray  # k 个升序节点下标
    nodes: Tensor        # C×k
    adjacency: Tensor    # k×k
    out: Tensor          # C×N，支撑集外的列为零

    def dense_nodes(self, num_nodes: int) -> np.ndarray:
        dense = np.zeros((self.nodes.shape[0], num_nodes), dtype=self.nodes.data.dtype)
        dense[:, self.support] = self.nodes.data
        return dense

    def dense_adjacency(self, num_nodes: int) -> np.ndarray:
        dense = np.zeros((num_nodes, num_nodes), dtype=self.adjacency.data.dtype)
        dense[np.ix_(self.support, self.support)] = self.adjacency.data
        return dense


def class_graph(x_flat: Tensor, support: np.ndarray, weight: Tensor, module: CdgcModule,
                readout: Optional[np.ndarray] = None) -> ClassGraph:
    """单个类别的构图与图卷积

    只在支撑集的 k 个节点上计算 k×k 相似度和 softmax，结果再放回 N 列；
    与在 N×N 上做掩码运算等价。readout 给出时，输出只保留其中的节点。
    """
    _, num_nodes = x_flat.shape
    support = np.asarray(support, dtype=np.int64)
    if support.size == 0:
        raise EmptyClassError()
    nodes = tc.gather_columns(x_flat, support)
    local = np.arange(support.size)
    adjacency = row_softmax(similarity_scores(nodes, module.sim_w, module.sim_w_prime, local), local)
    z = tc.transpose(graph_convolve(adjacency, tc.transpose(nodes), weight))
    if readout is not None:
        keep = np.asarray(readout, dtype=bool)[support].astype(z.data.dtype)
        z = tc.mul(z, Tensor(np.broadcast_to(keep, z.shape), dtype=z.dtype))
    return ClassGraph(support, nodes, adjacency, tc.scatter_columns(z, support, num_nodes))


def class_wise_reason(x: Tensor, sampled: SampledSet, module: CdgcModule) -> Tensor:
    """对每个类别在其节点集合上做图推理，结果堆叠为 M×C×N

    重复 M 份的输入特征不显式展开，而是同一份 x 依次用于 M 张类别图。
    """
    channels, height, width = x.shape
    num_nodes = height * width
    if sampled.num_nodes != num_nodes:
        raise DimensionError(f"采样集合节点数 {sampled.num_nodes} 与特征 {height}×{width} 不一致")
    x_flat = tc.reshape(x, (channels, num_nodes))
    slices = []
    for m in range(sampled.num_classes):
        try:
            graph = class_graph(x_flat, sampled.indices[m], module.group_weight(m), module,
                                sampled.readout_mask(m))
            slices.append(tc.reshape(graph.out, (1, channels, num_nodes)))
        except EmptyClassError:
            logger.debug(f"类别 {m} 没有节点，输出零切片")
            slices.append(Tensor(np.zeros((1, channels, num_nodes)), dtype=x.dtype))
    return tc.concat(slices, axis=0)


def aggregate_classes(per_class: Tensor, module: CdgcModule, height: int, width: int) -> Tensor:
    """M×C×N 重排为 (M·C)×H×W，经 1×1 卷积得到 C×H×W"""
    num_classes, channels, num_nodes = per_class.shape
    if num_nodes != height * width:
        raise DimensionError(f"节点数 {num_nodes} 与 {height}×{width} 不一致")
    grid = tc.reshape(per_class, (num_classes * channels, height, width))
    return tc.conv2d(grid, module.aggregation_kernel)


def fuse(original: Tensor, refined: Tensor, module: CdgcModule) -> Tensor:
    """concat：通道拼接后 1×1 卷积；sum：逐元素相加后 1×1 卷积"""
    if original.shape != refined.shape:
        raise DimensionError(f"fuse: 形状不一致 {original.shape} 与 {refined.shape}")
    if module.cfg.fusion == "concat":
        combined = tc.concat([original, refined], axis=0)
    else:
        combined = tc.add(original, refined)
    return tc.conv2d(combined, module.fusion_kernel)


def plain_reason(x: Tensor, module: CdgcModule) -> Tensor:
    """所有节点构成一张相似度图，单一权重图卷积"""
    channels, height, width = x.shape
    num_nodes = height * width
    x_flat = tc.reshape(x, (channels, num_nodes))
    support = np.arange(num_nodes)
    scores = similarity_scores(x_flat, module.sim_w, module.sim_w_prime, support)
    adjacency = row_softmax(scores, support)
    z = graph_convolve(adjacency, tc.transpose(x_flat), module.plain_weight)
    return tc.reshape(tc.transpose(z), (channels, height, width))
