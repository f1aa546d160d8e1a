#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
稠密张量运算核心
每个算子在前向时记录反向函数，反向传播按拓扑逆序执行，梯度按加法累积。
另外提供有限差分梯度校验、可拆分随机数发生器和 CDT1 张量文件读写。
"""

import json
import logging
import math
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from cdgc_errors import ConfigError, DataError, DimensionError, NumericError, UsageError

logger = logging.getLogger(__name__)

# 训练默认 32 位，梯度校验时切到 64 位
_DTYPE = np.float32

CDT1_MAGIC = b"CDT1"

Number = Union[int, float]


def is_float64_mode() -> bool:
    return _DTYPE == np.float64


@contextmanager
def float64_mode():
    """在 with 块内把新建张量切换到 64 位精度"""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = previous


class Tensor:
    """带可选梯度槽的稠密张量"""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype if dtype is not None else _DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = ""

    # ---- 基本属性 ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() 只适用于标量张量，当前形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op or 'leaf'})"

    # ---- 反向传播 ----
    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None):
        """从本张量开始反向传播；不给 grad 时要求本张量是标量"""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"非标量输出 {self.shape} 需要显式传入上游梯度")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # ---- 运算符 ----
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise UsageError("只支持除以标量")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, Sequence, Number]


def tensor(data, requires_grad: bool = False) -> Tensor:
    """以当前精度新建张量（拷贝数据）"""
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    dtype = np.result_type(*[p.data.dtype for p in parents])
    out = Tensor(data, dtype=dtype)
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"{op} 产生了非有限值")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out._op = op
    return out


def _as_tensor(value: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: 形状不一致 {a.shape} 与 {b.shape}")


# ---- 逐元素运算 ----
def add(a: Tensor, b: TensorLike) -> Tensor:
    if isinstance(b, (int, float)):
        return add_scalar(a, b)
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: TensorLike) -> Tensor:
    if isinstance(b, (int, float)):
        return add_scalar(a, -b)
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: TensorLike) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, b)
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, s: Number) -> Tensor:
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Tensor, s: Number) -> Tensor:
    return _result(a.data + s, (a,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    """max(x, 0)；x 恰为 0 时梯度取 0"""
    gate = x.data > 0
    return _result(np.where(gate, x.data, 0), (x,), lambda g: (g * gate,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: 输入包含非正数")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


# ---- 线性代数 ----
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """二维矩阵乘法"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: 形状不匹配 {a.shape} 与 {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# ---- 形状变换 ----
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: 无法把 {a.shape} 变为 {shape}")
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: 轴 {axes} 与形状 {a.shape} 不匹配")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat: 输入为空")
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
                t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis):
            raise DimensionError(f"concat: 形状不匹配 {first.shape} 与 {t.shape}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def _column_index(index, size: int, op: str) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= size):
        raise DimensionError(f"{op}: 列下标超出 [0, {size})")
    if np.unique(index).size != index.size:
        raise UsageError(f"{op}: 列下标不能重复")
    return index


def gather_columns(a: Tensor, index: Sequence[int]) -> Tensor:
    """取二维张量的若干列，C×N → C×k"""
    if a.ndim != 2:
        raise DimensionError(f"gather_columns: 需要二维输入，当前形状 {a.shape}")
    index = _column_index(index, a.shape[1], "gather_columns")

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, index] = g
        return (full,)

    return _result(a.data[:, index], (a,), backward, "gather_columns")


def scatter_columns(a: Tensor, index: Sequence[int], size: int) -> Tensor:
    """gather_columns 的逆：C×k 放回 C×size 的对应列，其余列为零"""
    if a.ndim != 2:
        raise DimensionError(f"scatter_columns: 需要二维输入，当前形状 {a.shape}")
    index = _column_index(index, size, "scatter_columns")
    if index.size != a.shape[1]:
        raise DimensionError(f"scatter_columns: {index.size} 个下标对应 {a.shape[1]} 列")
    out = np.zeros((a.shape[0], size), dtype=a.data.dtype)
    out[:, index] = a.data
    return _result(out, (a,), lambda g: (g[:, index],), "scatter_columns")


# ---- 归约 ----
def _normalize_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes], dtype=np.int64))
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ---- 卷积 ----
def conv_output_size(size: int, ksize: int, stride: int, dilation: int, padding: int) -> int:
    """卷积输出边长，不为整数时报配置错误"""
    span = dilation * (ksize - 1) + 1
    numerator = size + 2 * padding - span
    if numerator < 0 or numerator % stride != 0:
        raise ConfigError(
            f"卷积输出尺寸不是正整数: size={size}, kernel={ksize}, stride={stride}, "
            f"dilation={dilation}, padding={padding}")
    return numerator // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """带零填充的互相关，x: C_in×H×W，kernel: C_out×C_in×k×k"""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: 形状不匹配 {x.shape} 与 {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d: 卷积核必须是奇数方形，当前 {kh}×{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride={stride}, dilation={dilation}, padding={padding} 不合法")
    _, height, width = x.shape
    out_h = conv_output_size(height, kh, stride, dilation, padding)
    out_w = conv_output_size(width, kw, stride, dilation, padding)

    xpad = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = []
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            windows.append((
                slice(r0, r0 + stride * (out_h - 1) + 1, stride),
                slice(c0, c0 + stride * (out_w - 1) + 1, stride),
            ))
    cols = np.empty((c_in, kh, kw, out_h, out_w), dtype=xpad.dtype)
    for n, (rows, columns) in enumerate(windows):
        cols[:, n // kw, n % kw] = xpad[:, rows, columns]
    out = np.tensordot(kernel.data, cols, axes=([1, 2, 3], [0, 1, 2]))

    def backward(g):
        dkernel = np.tensordot(g, cols, axes=([1, 2], [3, 4]))
        dcols = np.tensordot(kernel.data, g, axes=([0], [0]))
        dxpad = np.zeros_like(xpad)
        for n, (rows, columns) in enumerate(windows):
            dxpad[:, rows, columns] += dcols[:, n // kw, n % kw]
        return dxpad[:, padding:padding + height, padding:padding + width], dkernel

    return _result(out, (x, kernel), backward, "conv2d")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """给 C×H×W 特征的每个通道加偏置"""
    if x.ndim != 3 or bias.shape != (x.shape[0],):
        raise DimensionError(f"add_channel_bias: 形状不匹配 {x.shape} 与 {bias.shape}")
    return _result(x.data + bias.data[:, None, None], (x, bias),
                   lambda g: (g, g.sum(axis=(1, 2))), "add_channel_bias")


# ---- 归一化 ----
def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """按行 softmax，只在 mask 为真的列上归一化；整行无支撑时输出全零"""
    mask = np.asarray(mask, dtype=bool)
    if scores.ndim != 2 or mask.shape != scores.shape:
        raise DimensionError(f"masked_softmax: 形状不匹配 {scores.shape} 与 {mask.shape}")
    filled = np.where(mask, scores.data, -np.inf)
    row_max = filled.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0)
    e = np.where(mask, np.exp(np.where(mask, scores.data - row_max, 0)), 0)
    denom = e.sum(axis=1, keepdims=True)
    out = e / np.where(denom > 0, denom, 1)

    def backward(g):
        return (out * (g - np.sum(out * g, axis=1, keepdims=True)),)

    return _result(out, (scores,), backward, "masked_softmax")


def log_softmax(x: Tensor, axis: int = 0) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


# ---- 随机数与初始化 ----
class Rng:
    """确定性、可拆分的伪随机数发生器

    底层为 numpy 的 PCG64，拆分通过 SeedSequence.spawn 完成；同一种子在任何平台上
    产生同一序列。
    """

    def __init__(self, seed: Union[int, np.random.SeedSequence]):
        if isinstance(seed, np.random.SeedSequence):
            self._seed_seq = seed
        else:
            self._seed_seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seed_seq))

    @property
    def seed(self):
        return self._seed_seq.entropy

    def split(self, n: int) -> List["Rng"]:
        """派生 n 个相互独立的子发生器"""
        return [Rng(child) for child in self._seed_seq.spawn(n)]

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, scale: float, shape=None) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int) -> int:
        """[low, high) 内的整数"""
        return int(self._gen.integers(low, high))

    def random(self) -> float:
        return float(self._gen.random())

    def sample_without_replacement(self, population: np.ndarray, k: int) -> np.ndarray:
        """从 population 中无放回均匀抽取 k 个，结果升序"""
        population = np.asarray(population)
        if k <= 0:
            return population[:0].copy()
        return np.sort(self._gen.choice(population, size=k, replace=False))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def xavier_uniform(shape: Sequence[int], fan_in: int, fan_out: int, rng: Rng) -> Tensor:
    """[-s, s] 均匀初始化，s = sqrt(6 / (fan_in + fan_out))"""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, tuple(shape)), requires_grad=True)


# ---- 梯度校验 ----
def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """中心差分对比解析梯度，返回最大相对误差

    相对误差 = |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    if not is_float64_mode():
        raise UsageError("grad_check 需要在 float64_mode() 下运行")
    if not 1e-7 <= eps <= 1e-3:
        raise UsageError(f"eps={eps} 超出 [1e-7, 1e-3]")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise UsageError(f"输入张量 {t.shape} 不是 64 位")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    if out.size != 1:
        raise UsageError(f"grad_check 要求标量输出，当前形状 {out.shape}")
    out.backward()
    analytic = [t.grad.reshape(-1).copy() if t.grad is not None else np.zeros(t.size) for t in inputs]

    worst = 0.0
    for t, grads in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = f(*inputs).item()
            flat[i] = original - eps
            f_minus = f(*inputs).item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2 * eps)
            err = abs(grads[i] - numeric) / max(1e-8, abs(grads[i]) + abs(numeric))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst


# ---- CDT1 文件格式 ----
def save_tensor(path: Union[str, Path], value: Union[Tensor, np.ndarray]):
    """写 CDT1：魔数、u32 rank、rank 个 u32 维度、行主序 f32 小端数据"""
    array = value.data if isinstance(value, Tensor) else np.asarray(value)
    array = np.ascontiguousarray(array, dtype="<f4")
    header = CDT1_MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes(order="C"))


def load_array(path: Union[str, Path]) -> np.ndarray:
    """读 CDT1，返回 float32 数组"""
    raw = Path(path).read_bytes()
    if raw[:4] != CDT1_MAGIC:
        raise DataError(f"{path} 不是 CDT1 文件")
    if len(raw) < 8:
        raise DataError(f"{path} 头部不完整")
    (rank,) = struct.unpack_from("<I", raw, 4)
    offset = 8 + 4 * rank
    if len(raw) < offset:
        raise DataError(f"{path} 维度信息不完整")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - offset != 4 * count:
        raise DataError(f"{path} 数据长度 {len(raw) - offset} 与形状 {dims} 不符")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


# ---- 参数存储 ----
class ParamStore:
    """按名字保存可学习参数

    检查点是一个目录：manifest.json 记录 名字 → 形状（保持顺序），每个参数一个 CDT1 文件。
    """

    MANIFEST = "manifest.json"

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.logger = logging.getLogger(__name__)

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigError(f"参数名重复: {name}")
        value.requires_grad = True
        self._params[name] = value
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def num_values(self) -> int:
        return int(np.sum([p.size for p in self._params.values()]))

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def save(self, directory: Union[str, Path]):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": "CDT1",
            "params": [{"name": name, "shape": list(p.shape)} for name, p in self._params.items()],
        }
        with open(directory / self.MANIFEST, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2)
        for name, p in self._params.items():
            save_tensor(directory / f"{name}.cdt", p)
        self.logger.info(f"检查点已保存: {directory} ({len(self._params)} 个参数)")

    def load(self, directory: Union[str, Path]):
        """从检查点目录读回参数，名字与形状必须一致"""
        directory = Path(directory)
        manifest_path = directory / self.MANIFEST
        if not manifest_path.exists():
            raise DataError(f"检查点缺少 {self.MANIFEST}: {directory}")
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        entries = manifest.get("params", [])
        if [e["name"] for e in entries] != self.names():
            raise DataError(f"检查点参数列表与模型不一致: {directory}")
        for entry in entries:
            p = self._params[entry["name"]]
            array = load_array(directory / f"{entry['name']}.cdt")
            if list(array.shape) != list(entry["shape"]) or array.shape != p.shape:
                raise DataError(f"参数 {entry['name']} 形状不一致: {array.shape} 与 {p.shape}")
            p.data = array.astype(p.data.dtype)
            p.grad = None
        self.logger.info(f"检查点已载入: {directory}")
