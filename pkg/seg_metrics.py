#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
评估指标：混淆矩阵与 mIoU
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from cdgc_errors import DataError, DimensionError

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    """M×M 计数，行为真值，列为预测"""
    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise DimensionError(f"混淆矩阵形状不一致: {self.counts.shape} 与 {other.counts.shape}")
        self.counts += other.counts
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts.copy()).update(other)


def confusion(pred: np.ndarray, labels: np.ndarray, num_classes: int,
              ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    """逐像素累加 counts[真值][预测]，忽略像素不计"""
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if pred.shape != labels.shape:
        raise DimensionError(f"预测 {pred.shape} 与标签 {labels.shape} 像素数不一致")
    valid = labels != ignore_index
    gt, pr = labels[valid].astype(np.int64), pred[valid].astype(np.int64)
    for name, values in (("标签", gt), ("预测", pr)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise DataError(f"{name}超出类别范围 0..{num_classes - 1}")
    counts = np.bincount(gt * num_classes + pr, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes).astype(np.int64))


def miou(cm: ConfusionMatrix) -> Tuple[float, List[float]]:
    """返回 (mIoU, 各类 IoU)；分母为零的类别记为 NaN 且不计入平均"""
    counts = cm.counts.astype(np.float64)
    inter = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - inter
    present = union > 0
    if not np.any(present):
        raise DataError("所有类别的 IoU 分母都为零，mIoU 无定义")
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = inter[present] / union[present]
    return float(iou[present].mean()), iou.tolist()
