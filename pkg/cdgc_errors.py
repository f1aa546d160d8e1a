#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
CDGC 工具包的异常类型
所有模块抛出的错误都继承自 CdgcError，命令行入口统一捕获
"""


class CdgcError(Exception):
    """CDGC 工具包错误基类"""


class DimensionError(CdgcError, ValueError):
    """张量形状不匹配"""


class ConfigError(CdgcError, ValueError):
    """配置错误（卷积几何、变体名、配置键、数据集几何等）"""


class UsageError(CdgcError, ValueError):
    """接口使用错误"""


class EmptyClassError(CdgcError):
    """某个类别的节点集合为空"""

    def __init__(self, class_id=None):
        self.class_id = class_id
        super().__init__(f"类别 {class_id} 的节点集合为空" if class_id is not None else "节点集合为空")


class NumericError(CdgcError, ArithmeticError):
    """出现 NaN / Inf"""


class DataError(CdgcError, ValueError):
    """标签、预测或文件内容不合法"""
