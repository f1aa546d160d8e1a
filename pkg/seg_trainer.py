#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
训练循环
poly 学习率、带动量与权重衰减的 SGD、单步训练，以及逐步写入的训练指标 CSV
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from cdgc_errors import NumericError, UsageError
from cdgc_network import CdgcNet
from seg_dataset import SegSample
from seg_losses import LossWeights, OhemConfig, cross_entropy, ohem_loss, total_loss
from tensor_core import ParamStore, Rng

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["iter", "lr", "l_c", "l_f", "l_a", "l_total"]


@dataclass
class OptimState:
    """SGD 与 poly 学习率的状态"""
    lr_base: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iter: int = 0
    max_iter: int = 1
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainConfig:
    steps: int = 2000
    # 前 warmup_steps 步只训练主干、粗预测头和辅助头
    warmup_steps: int = 0
    lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0005
    weights: LossWeights = field(default_factory=LossWeights)
    ohem: OhemConfig = field(default_factory=OhemConfig)
    ignore_index: int = 255
    log_every: int = 100

    def optim_state(self) -> OptimState:
        return OptimState(lr_base=self.lr, power=self.power, momentum=self.momentum,
                          weight_decay=self.weight_decay, iter=0, max_iter=self.steps)


def poly_lr(state: OptimState) -> float:
    """lr_base · (1 − iter/max_iter)^power"""
    if state.max_iter <= 0:
        raise UsageError(f"max_iter 必须为正，当前 {state.max_iter}")
    return state.lr_base * (1.0 - state.iter / state.max_iter) ** state.power


def sgd_step(params: ParamStore, grads: Mapping[str, Optional[np.ndarray]], state: OptimState) -> ParamStore:
    """v ← momentum·v + grad + weight_decay·param；param ← param − lr·v

    梯度缺失视为零；任何参数的梯度含非有限值时不做任何更新并报错。
    """
    if not 0 <= state.iter < state.max_iter:
        raise UsageError(f"iter={state.iter} 超出 [0, {state.max_iter})")
    for name, _ in params.items():
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"参数 {name} 的梯度包含 {bad} 个非有限值（iter={state.iter}）")

    lr = poly_lr(state)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g + state.weight_decay * p.data
        state.velocity[name] = v.astype(p.data.dtype)
        p.data = (p.data - lr * state.velocity[name]).astype(p.data.dtype)
    state.iter += 1
    return params


def train_step(sample: SegSample, model: CdgcNet, cfg: TrainConfig, state: OptimState,
               rng: Rng) -> Dict[str, float]:
    """一次完整的前向、反向和参数更新，返回本步指标"""
    model.params.zero_grad()
    refine = state.iter >= cfg.warmup_steps
    out = model.forward(sample.image, sample.labels, rng, training=True, ignore_index=cfg.ignore_index,
                        refine=refine)
    l_c = cross_entropy(out.coarse_logits, sample.labels, cfg.ignore_index)
    l_a = cross_entropy(out.aux_logits, sample.labels, cfg.ignore_index)
    l_f = None
    if out.refined_logits is not None:
        l_f = ohem_loss(out.refined_logits, sample.labels, cfg.ohem.threshold,
                        cfg.ohem.min_kept, cfg.ignore_index)
    loss = total_loss(l_c, l_f, l_a, cfg.weights)
    loss.backward()

    metrics = {
        "iter": state.iter,
        "lr": poly_lr(state),
        "l_c": l_c.item(),
        "l_f": l_f.item() if l_f is not None else 0.0,
        "l_a": l_a.item(),
        "l_total": loss.item(),
    }
    sgd_step(model.params, {name: p.grad for name, p in model.params.items()}, state)
    return metrics


class MetricsWriter:
    """训练指标 CSV：每步追加一行"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(columns=METRIC_COLUMNS).to_csv(self.path, index=False)
        self.logger = logging.getLogger(__name__)
        self.logger.debug(f"训练指标写入: {self.path}")

    def append(self, metrics: Mapping[str, float]):
        row = pd.DataFrame([{k: metrics[k] for k in METRIC_COLUMNS}])
        row.to_csv(self.path, mode="a", header=False, index=False, float_format="%.9g")


def train(model: CdgcNet, samples: List[SegSample], cfg: TrainConfig, rng: Rng,
          metrics_path: Optional[Union[str, Path]] = None) -> OptimState:
    """按 epoch 打乱样本顺序，批大小为 1"""
    if not samples:
        raise UsageError("训练集为空")
    if not 0 <= cfg.warmup_steps <= cfg.steps:
        raise UsageError(f"warmup_steps={cfg.warmup_steps} 超出 [0, {cfg.steps}]")
    order_rng, sample_rng = rng.split(2)
    state = cfg.optim_state()
    writer = MetricsWriter(metrics_path) if metrics_path is not None else None

    order: List[int] = []
    for step in tqdm(range(cfg.steps), desc=f"训练 {model.variant.name}", disable=cfg.steps == 0):
        if not order:
            order = list(order_rng.permutation(len(samples)))
        if cfg.warmup_steps and step == cfg.warmup_steps and model.variant.kind != "none":
            logger.info(f"预热 {cfg.warmup_steps} 步结束，开始训练精细分支")
        metrics = train_step(samples[order.pop(0)], model, cfg, state, sample_rng)
        if writer is not None:
            writer.append(metrics)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info(f"iter {metrics['iter']}: lr={metrics['lr']:.6f} l_c={metrics['l_c']:.4f} "
                        f"l_f={metrics['l_f']:.4f} l_a={metrics['l_a']:.4f} l_total={metrics['l_total']:.4f}")
    return state
