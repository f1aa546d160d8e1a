#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
64 位梯度校验套件
每个可微运算、CDGC 模块和整条流水线的标量损失，在多组随机形状与种子下
用中心差分核对解析梯度
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import tensor_core as tc
from basic_net import BasicNetConfig, ConvSpec
from cdgc_module import CdgcConfig, CdgcModule, graph_convolve
from cdgc_network import CdgcNet, Variant
from graph_builder import SampledSet, row_softmax, similarity_scores
from seg_losses import LossWeights, cross_entropy, ohem_loss, total_loss
from tensor_core import ParamStore, Rng, Tensor

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
DEFAULT_SEEDS = 20
DEFAULT_EPS = 1e-6

# 流水线用例的差分步长与抽样条件
PIPELINE_EPS = 3e-6
PIPELINE_RELU_MARGIN = 1e-4
PIPELINE_GRAD_FLOOR = 1e-7
PIPELINE_ATTEMPTS = 20

Built = Tuple[Callable[..., Tensor], List[Tensor]]


@dataclass
class GradCase:
    name: str
    build: Callable[[Rng], Built]
    eps: float = DEFAULT_EPS


@dataclass
class GradResult:
    case: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


# ---- 工具 ----
def _randn(rng: Rng, *shape) -> Tensor:
    return tc.tensor(rng.normal(1.0, shape))


def _away_from_zero(rng: Rng, *shape) -> Tensor:
    """|x| ∈ [0.1, 1]，避开 relu 的折点"""
    sign = np.where(rng.uniform(0, 1, shape) < 0.5, -1.0, 1.0)
    return tc.tensor(sign * rng.uniform(0.1, 1.0, shape))


def _dim(rng: Rng, low: int = 2, high: int = 5) -> int:
    return rng.integers(low, high)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """Σ out·R，把任意形状的输出变为标量"""
    return tc.sum(tc.mul(out, Tensor(weights)))


def _unary(op: Callable[[Tensor], Tensor], make=_randn) -> Callable[[Rng], Built]:
    def build(rng: Rng) -> Built:
        shape = (_dim(rng), _dim(rng))
        r = rng.normal(1.0, shape)
        return (lambda x: _weighted(op(x), r)), [make(rng, *shape)]
    return build


def _binary(op: Callable[[Tensor, Tensor], Tensor]) -> Callable[[Rng], Built]:
    def build(rng: Rng) -> Built:
        shape = (_dim(rng), _dim(rng))
        r = rng.normal(1.0, shape)
        return (lambda a, b: _weighted(op(a, b), r)), [_randn(rng, *shape), _randn(rng, *shape)]
    return build


# ---- 各运算 ----
def _matmul(rng: Rng) -> Built:
    n, k, m = _dim(rng), _dim(rng), _dim(rng)
    r = rng.normal(1.0, (n, m))
    return (lambda a, b: _weighted(tc.matmul(a, b), r)), [_randn(rng, n, k), _randn(rng, k, m)]


def _reshape(rng: Rng) -> Built:
    a, b = _dim(rng), _dim(rng)
    r = rng.normal(1.0, (b, a, 2))
    return (lambda x: _weighted(tc.reshape(x, (b, a, 2)), r)), [_randn(rng, 2, a, b)]


def _transpose(rng: Rng) -> Built:
    shape = (_dim(rng), _dim(rng), _dim(rng))
    axes = tuple(int(i) for i in rng.permutation(3))
    r = rng.normal(1.0, tuple(shape[i] for i in axes))
    return (lambda x: _weighted(tc.transpose(x, axes), r)), [_randn(rng, *shape)]


def _concat(rng: Rng) -> Built:
    axis = rng.integers(0, 2)
    base = [_dim(rng), _dim(rng)]
    inputs = []
    for _ in range(3):
        shape = list(base)
        shape[axis] = _dim(rng, 1, 4)
        inputs.append(_randn(rng, *shape))
    out_shape = list(base)
    out_shape[axis] = sum(t.shape[axis] for t in inputs)
    r = rng.normal(1.0, tuple(out_shape))
    return (lambda *xs: _weighted(tc.concat(xs, axis=axis), r)), inputs


def _reduction(op) -> Callable[[Rng], Built]:
    def build(rng: Rng) -> Built:
        shape = (_dim(rng), _dim(rng), _dim(rng))
        axis = rng.integers(0, 3)
        keepdims = rng.random() < 0.5
        out_shape = tuple(1 if i == axis else s for i, s in enumerate(shape) if keepdims or i != axis)
        r = rng.normal(1.0, out_shape)
        return (lambda x: _weighted(op(x, axis=axis, keepdims=keepdims), r)), [_randn(rng, *shape)]
    return build


def _conv2d(rng: Rng) -> Built:
    c_in, c_out = _dim(rng, 1, 4), _dim(rng, 1, 4)
    ksize = 3 if rng.random() < 0.75 else 1
    dilation = _dim(rng, 1, 3)
    stride = _dim(rng, 1, 3)
    padding = dilation * (ksize - 1) // 2
    # (H − 1) 为 stride 的整数倍时输出尺寸为整数
    height = stride * _dim(rng, 2, 4) + 1
    width = stride * _dim(rng, 2, 4) + 1
    out_h = (height - 1) // stride + 1
    out_w = (width - 1) // stride + 1
    r = rng.normal(1.0, (c_out, out_h, out_w))
    f = lambda x, k: _weighted(tc.conv2d(x, k, stride=stride, dilation=dilation, padding=padding), r)
    return f, [_randn(rng, c_in, height, width), _randn(rng, c_out, c_in, ksize, ksize)]


def _channel_bias(rng: Rng) -> Built:
    c, h, w = _dim(rng), _dim(rng), _dim(rng)
    r = rng.normal(1.0, (c, h, w))
    return (lambda x, b: _weighted(tc.add_channel_bias(x, b), r)), [_randn(rng, c, h, w), _randn(rng, c)]


def _masked_softmax(rng: Rng) -> Built:
    n, m = _dim(rng, 2, 6), _dim(rng, 2, 6)
    mask = rng.uniform(0, 1, (n, m)) < 0.6
    r = rng.normal(1.0, (n, m))
    return (lambda s: _weighted(tc.masked_softmax(s, mask), r)), [_randn(rng, n, m)]


def _log_softmax(rng: Rng) -> Built:
    shape = (_dim(rng), _dim(rng), _dim(rng))
    axis = rng.integers(0, 3)
    r = rng.normal(1.0, shape)
    return (lambda x: _weighted(tc.log_softmax(x, axis=axis), r)), [_randn(rng, *shape)]


def _random_support(rng: Rng, num_nodes: int) -> np.ndarray:
    return rng.sample_without_replacement(np.arange(num_nodes), _dim(rng, 1, num_nodes + 1))


def _gather_columns(rng: Rng) -> Built:
    c, n = _dim(rng), _dim(rng, 3, 7)
    index = _random_support(rng, n)
    r = rng.normal(1.0, (c, index.size))
    return (lambda x: _weighted(tc.gather_columns(x, index), r)), [_randn(rng, c, n)]


def _scatter_columns(rng: Rng) -> Built:
    c, n = _dim(rng), _dim(rng, 3, 7)
    index = _random_support(rng, n)
    r = rng.normal(1.0, (c, n))
    return (lambda x: _weighted(tc.scatter_columns(x, index, n), r)), [_randn(rng, c, index.size)]


def _adjacency(rng: Rng) -> Built:
    c, n = _dim(rng, 2, 4), _dim(rng, 3, 7)
    support = _random_support(rng, n)
    r = rng.normal(1.0, (n, n))

    def f(x, w, w_prime):
        return _weighted(row_softmax(similarity_scores(x, w, w_prime, support), support), r)

    return f, [tc.tensor(rng.normal(0.5, (c, n))), _randn(rng, c, c), _randn(rng, c, c)]


def _graph_convolve(rng: Rng) -> Built:
    c, n = _dim(rng), _dim(rng, 3, 6)
    a = tc.masked_softmax(_randn(rng, n, n), np.ones((n, n), dtype=bool))
    r = rng.normal(1.0, (n, c))
    # relu 输入为 A·X·W，取正的 X 与 W 让输入远离折点
    x = tc.tensor(rng.uniform(0.2, 1.0, (n, c)))
    w = tc.tensor(rng.uniform(0.2, 1.0, (c, c)))
    return (lambda a_, x_, w_: _weighted(graph_convolve(a_, x_, w_), r)), [a.detach(), x, w]


def _cdgc_forward(rng: Rng) -> Built:
    num_classes, channels = _dim(rng, 2, 4), _dim(rng, 2, 4)
    height, width = _dim(rng, 2, 4), _dim(rng, 2, 4)
    fusion = "concat" if rng.random() < 0.5 else "sum"
    params = ParamStore()
    module = CdgcModule.initialize(CdgcConfig(num_classes, channels, fusion), params, rng)
    num_nodes = height * width
    # 随机采样集合，允许重叠，也允许空类别
    indices = [np.sort(rng.sample_without_replacement(np.arange(num_nodes), rng.integers(0, num_nodes + 1)))
               for _ in range(num_classes)]
    x = tc.tensor(rng.normal(0.5, (channels, height, width)))
    r = rng.normal(1.0, (channels, height, width))
    readout = rng.uniform(0, 1, (num_classes, num_nodes)) < 0.7 if rng.random() < 0.5 else None
    sampled = SampledSet(indices, num_nodes, readout=readout)

    def f(x_, *_params):
        return _weighted(module.forward(x_, sampled).fused, r)

    return f, [x] + [p for _, p in params.items()]


def _labels(rng: Rng, num_classes: int, height: int, width: int) -> np.ndarray:
    labels = np.array([[rng.integers(0, num_classes) for _ in range(width)] for _ in range(height)])
    if rng.random() < 0.5:
        labels[0, 0] = 255
    return labels


def _cross_entropy(rng: Rng) -> Built:
    m, h, w = _dim(rng, 2, 5), _dim(rng), _dim(rng)
    labels = _labels(rng, m, h, w)
    return (lambda x: cross_entropy(x, labels)), [_randn(rng, m, h, w)]


def _ohem(rng: Rng) -> Built:
    m, h, w = _dim(rng, 2, 5), _dim(rng), _dim(rng)
    labels = _labels(rng, m, h, w)
    valid = int(np.count_nonzero(labels != 255))
    return (lambda x: ohem_loss(x, labels, threshold=1.0, min_kept=valid)), [_randn(rng, m, h, w)]


def relu_margin(out: Tensor) -> float:
    """计算图中所有 relu 输入离 0 的最小距离，恰为 0 的条目不计"""
    margin = np.inf
    for node in out._topological_order():
        if node._op == "relu":
            z = np.abs(node._parents[0].data)
            z = z[z > 0]
            if z.size:
                margin = min(margin, float(z.min()))
    return margin


def smallest_gradient(inputs: Sequence[Tensor]) -> float:
    """所有输入梯度中最小的非零绝对值"""
    values = [np.abs(t.grad).reshape(-1) for t in inputs if t.grad is not None]
    values = np.concatenate(values) if values else np.zeros(0)
    nonzero = values[values > 0]
    return float(nonzero.min()) if nonzero.size else np.inf


def _draw_pipeline(rng: Rng) -> Built:
    num_classes = 2
    cfg = BasicNetConfig(in_channels=1, feature_channels=3, num_classes=num_classes,
                         trunk=[ConvSpec(3, 3, 1), ConvSpec(3, 3, 2)], aux_tap=0)
    fusion = "concat" if rng.random() < 0.5 else "sum"
    model = CdgcNet.build(cfg, fusion, Variant("class-ds", 0.5), rng.integers(0, 2 ** 31))
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data = rng.uniform(0.05, 0.2, p.shape)
    height = width = 4
    image = tc.tensor(rng.uniform(0.0, 1.0, (1, height, width)), requires_grad=True)
    labels = _labels(rng, num_classes, height, width)
    first = model.forward(image)
    sampled = model.sample_nodes(first.coarse_logits, labels, rng, training=True)
    valid = int(np.count_nonzero(labels != 255))
    weights = LossWeights()

    def f(image_, *_params):
        out = model.forward(image_, sampled=sampled)
        l_c = cross_entropy(out.coarse_logits, labels)
        l_a = cross_entropy(out.aux_logits, labels)
        l_f = ohem_loss(out.refined_logits, labels, threshold=1.0, min_kept=valid)
        return total_loss(l_c, l_f, l_a, weights)

    return f, [image] + [p for _, p in model.params.items()]


def _pipeline(rng: Rng) -> Built:
    """整条流水线的标量损失，采样集合固定

    relu 输入需离折点至少 PIPELINE_RELU_MARGIN，非零梯度分量需不小于
    PIPELINE_GRAD_FLOOR，不满足时用同一随机流重新抽取模型与输入。
    """
    for attempt in range(PIPELINE_ATTEMPTS):
        f, inputs = _draw_pipeline(rng)
        out = f(*inputs)
        out.backward()
        margin, floor = relu_margin(out), smallest_gradient(inputs)
        for t in inputs:
            t.grad = None
        if margin >= PIPELINE_RELU_MARGIN and floor >= PIPELINE_GRAD_FLOOR:
            break
        logger.debug(f"pipeline 第 {attempt + 1} 次抽取不满足条件: relu 余量 {margin:.2e}, 最小梯度 {floor:.2e}")
    return f, inputs


CASES = [
    GradCase("add", _binary(tc.add)),
    GradCase("sub", _binary(tc.sub)),
    GradCase("mul", _binary(tc.mul)),
    GradCase("neg", _unary(tc.neg)),
    GradCase("scale", _unary(lambda x: tc.scale(x, -1.7))),
    GradCase("add_scalar", _unary(lambda x: tc.mul(tc.add_scalar(x, 0.3), x))),
    GradCase("relu", _unary(tc.relu, _away_from_zero)),
    GradCase("exp", _unary(tc.exp)),
    GradCase("log", _unary(tc.log, lambda rng, *shape: tc.tensor(rng.uniform(0.5, 2.0, shape)))),
    GradCase("matmul", _matmul),
    GradCase("reshape", _reshape),
    GradCase("transpose", _transpose),
    GradCase("concat", _concat),
    GradCase("gather_columns", _gather_columns),
    GradCase("scatter_columns", _scatter_columns),
    GradCase("sum", _reduction(tc.sum)),
    GradCase("mean", _reduction(tc.mean)),
    GradCase("conv2d", _conv2d),
    GradCase("add_channel_bias", _channel_bias),
    GradCase("masked_softmax", _masked_softmax),
    GradCase("log_softmax", _log_softmax),
    GradCase("adjacency", _adjacency),
    GradCase("graph_convolve", _graph_convolve),
    GradCase("cdgc", _cdgc_forward),
    GradCase("cross_entropy", _cross_entropy),
    GradCase("ohem", _ohem),
    GradCase("pipeline", _pipeline, eps=PIPELINE_EPS),
]


def case_names() -> List[str]:
    return [case.name for case in CASES]


def run_case(case: GradCase, seed: int) -> GradResult:
    with tc.float64_mode():
        f, inputs = case.build(Rng(seed))
        error = tc.grad_check(f, inputs, case.eps)
    if error > TOLERANCE:
        logger.warning(f"梯度校验未通过: {case.name} seed={seed} 相对误差 {error:.3e}")
    return GradResult(case.name, seed, error)


def run_suite(seeds: Iterable[int] = range(DEFAULT_SEEDS), only: Sequence[str] = ()) -> List[GradResult]:
    """逐个运算、逐个种子运行梯度校验"""
    cases = [c for c in CASES if not only or c.name in only]
    jobs = [(case, seed) for case in cases for seed in seeds]
    results = [run_case(case, seed) for case, seed in tqdm(jobs, desc="梯度校验", disable=not jobs)]
    failed = sum(1 for r in results if not r.passed)
    logger.info(f"梯度校验完成: {len(results)} 项，失败 {failed} 项")
    return results
