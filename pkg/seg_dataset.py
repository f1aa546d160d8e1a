#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
合成分割数据集
背景加上 M−1 个随机放置的矩形或圆盘，颜色与类别相关并叠加噪声；
数据集目录为 manifest.json 加每个样本一对 CDT1 文件
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from cdgc_errors import ConfigError, DataError, DimensionError
from tensor_core import Rng, Tensor, load_array, save_tensor

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255
SHAPE_KINDS = ("rect", "disk")
MANIFEST = "manifest.json"


@dataclass
class SegSample:
    """一张图像及其逐像素标签"""
    image: Tensor        # in_channels×H×W，取值 [0, 1]
    labels: np.ndarray   # H×W int64，{0..M−1} ∪ {255}

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image.ndim != 3 or self.image.shape[1:] != self.labels.shape:
            raise DimensionError(f"图像 {self.image.shape} 与标签 {self.labels.shape} 形状不一致")

    def classes_present(self) -> np.ndarray:
        return np.unique(self.labels[self.labels != IGNORE_INDEX])


def class_palette(num_classes: int, in_channels: int, rng: Rng) -> np.ndarray:
    """M×in_channels 颜色表：每个通道是均匀分布电平的一个随机排列"""
    levels = np.linspace(0.15, 0.85, num_classes)
    palette = np.empty((num_classes, in_channels))
    for ch in range(in_channels):
        palette[:, ch] = levels[rng.permutation(num_classes)]
    return palette


def _shape_mask(kind: str, height: int, width: int, size: int, rng: Rng) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    if kind == "rect":
        h = rng.integers(max(1, size // 2), size + 1)
        w = rng.integers(max(1, size // 2), size + 1)
        top = rng.integers(0, height - h + 1)
        left = rng.integers(0, width - w + 1)
        return (rows >= top) & (rows < top + h) & (cols >= left) & (cols < left + w)
    radius = size / 2.0
    cy = rng.uniform(radius - 0.5, height - radius - 0.5)
    cx = rng.uniform(radius - 0.5, width - radius - 0.5)
    return (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2


def _mark_boundary(labels: np.ndarray) -> np.ndarray:
    """4 邻域内有其他类别的像素置为忽略值"""
    boundary = np.zeros(labels.shape, dtype=bool)
    vertical = labels[1:, :] != labels[:-1, :]
    horizontal = labels[:, 1:] != labels[:, :-1]
    boundary[1:, :] |= vertical
    boundary[:-1, :] |= vertical
    boundary[:, 1:] |= horizontal
    boundary[:, :-1] |= horizontal
    out = labels.copy()
    out[boundary] = IGNORE_INDEX
    return out


def _draw_labels(height: int, width: int, num_classes: int, shape_kinds: Sequence[str],
                 min_size: int, max_size: int, rng: Rng, max_attempts: int) -> np.ndarray:
    """依次画出类别 1..M−1 的形状，后画的遮挡先画的；缺类别则整体重画"""
    labels = np.zeros((height, width), dtype=np.int64)
    for attempt in range(max_attempts):
        labels = np.zeros((height, width), dtype=np.int64)
        for m in range(1, num_classes):
            kind = shape_kinds[rng.integers(0, len(shape_kinds))]
            size = rng.integers(min_size, max_size + 1)
            labels[_shape_mask(kind, height, width, size, rng)] = m
        if np.unique(labels).size == num_classes:
            return labels
        logger.debug(f"第 {attempt + 1} 次放置后有类别被完全遮挡，重新放置")
    logger.debug(f"{max_attempts} 次尝试后仍有类别缺失，保留最后一次结果")
    return labels


def generate_dataset(n: int, height: int, width: int, num_classes: int, noise: float, seed: int,
                     in_channels: int = 3, shape_kinds: Sequence[str] = SHAPE_KINDS,
                     min_size: Optional[int] = None, max_size: Optional[int] = None,
                     ignore_boundary: bool = False, max_attempts: int = 50) -> List[SegSample]:
    """生成 n 个样本，给定种子时结果逐字节确定"""
    if num_classes < 2:
        raise ConfigError(f"类别数必须 ≥ 2，当前 {num_classes}")
    if n < 0 or height < 1 or width < 1 or in_channels < 1:
        raise ConfigError(f"数据集尺寸不合法: n={n}, H={height}, W={width}, in_channels={in_channels}")
    if noise < 0:
        raise ConfigError(f"噪声强度必须非负，当前 {noise}")
    unknown = [k for k in shape_kinds if k not in SHAPE_KINDS]
    if not shape_kinds or unknown:
        raise ConfigError(f"未知形状类型: {unknown}（可选 {', '.join(SHAPE_KINDS)}）")
    side = min(height, width)
    if min_size is None:
        min_size = max(2, side // 6)
    if max_size is None:
        max_size = max(min_size, side // 2)
    if not 1 <= min_size <= max_size:
        raise ConfigError(f"形状尺寸范围不合法: [{min_size}, {max_size}]")
    if max_size > side:
        raise ConfigError(f"形状尺寸 {max_size} 大于图像 {height}×{width}")

    palette_rng, *sample_rngs = Rng(seed).split(n + 1)
    palette = class_palette(num_classes, in_channels, palette_rng)

    samples = []
    for rng in tqdm(sample_rngs, desc="生成数据集", disable=n == 0):
        labels = _draw_labels(height, width, num_classes, shape_kinds, min_size, max_size, rng, max_attempts)
        image = palette[labels].transpose(2, 0, 1)
        if noise > 0:
            image = image + rng.normal(noise, image.shape)
        image = np.clip(image, 0.0, 1.0)
        if ignore_boundary:
            labels = _mark_boundary(labels)
        samples.append(SegSample(Tensor(image), labels))
    logger.info(f"已生成 {n} 个 {height}×{width} 样本（M={num_classes}, noise={noise}, seed={seed}）")
    return samples


def class_presence(samples: Sequence[SegSample], num_classes: int) -> np.ndarray:
    """每个类别出现在多少比例的样本中"""
    if not samples:
        return np.zeros(num_classes)
    counts = np.zeros(num_classes)
    for sample in samples:
        counts[sample.classes_present()] += 1
    return counts / len(samples)


def save_dataset(samples: Sequence[SegSample], directory: Union[str, Path], **meta):
    """写入数据集目录；meta 记录生成参数"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        save_tensor(directory / f"sample_{i:04d}_image.cdt", sample.image)
        save_tensor(directory / f"sample_{i:04d}_labels.cdt", sample.labels.astype(np.float32))
    manifest = {"format": "CDT1", "n": len(samples), **meta}
    (directory / MANIFEST).write_text(json.dumps(manifest, ensure_ascii=False, indent=2), encoding="utf-8")
    logger.info(f"数据集已保存: {directory}（{len(samples)} 个样本）")


def load_manifest(directory: Union[str, Path]) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise DataError(f"数据集目录缺少 {MANIFEST}: {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_dataset(directory: Union[str, Path]) -> List[SegSample]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    samples = []
    for i in range(int(manifest["n"])):
        image = load_array(directory / f"sample_{i:04d}_image.cdt")
        raw = load_array(directory / f"sample_{i:04d}_labels.cdt")
        if not np.all(raw == np.round(raw)):
            raise DataError(f"样本 {i} 的标签不是整数")
        samples.append(SegSample(Tensor(image), raw.astype(np.int64)))
    logger.info(f"已加载数据集: {directory}（{len(samples)} 个样本）")
    return samples
