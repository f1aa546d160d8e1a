#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
结果表与报告
results.csv 逐行追加（variant, seed, coarse_miou, refined_miou），
同步导出 Excel 并自动调整列宽；消融实验汇总为 HTML 报告
"""

import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd
from jinja2 import Template
from openpyxl import load_workbook
from openpyxl.utils import get_column_letter

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["variant", "seed", "coarse_miou", "refined_miou"]
CLASS_IOU_COLUMNS = ["variant", "seed", "head", "class_id", "iou"]

# 期望的中位数 mIoU 关系
MIN_GAIN = 0.01


class ResultsTable:
    """结果 CSV 管理器"""

    def __init__(self, csv_path: Union[str, Path]):
        self.csv_path = Path(csv_path)
        self.logger = logging.getLogger(__name__)
        self._ensure_csv_exists()

    def _ensure_csv_exists(self):
        """确保 CSV 文件存在，如果不存在则创建"""
        if not self.csv_path.exists():
            self.csv_path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(columns=RESULT_COLUMNS).to_csv(self.csv_path, index=False)
            self.logger.info(f"创建新的结果文件: {self.csv_path}")

    def add_record(self, variant: str, seed: int, coarse_miou: float, refined_miou: float):
        row = pd.DataFrame([dict(zip(RESULT_COLUMNS, (variant, seed, coarse_miou, refined_miou)))])
        row.to_csv(self.csv_path, mode="a", header=False, index=False, float_format="%.6f")
        self.logger.info(f"记录结果: {variant} seed={seed} coarse={coarse_miou:.4f} refined={refined_miou:.4f}")

    def read(self) -> pd.DataFrame:
        return pd.read_csv(self.csv_path)

    def export_excel(self, excel_path: Optional[Union[str, Path]] = None) -> Path:
        """导出为 xlsx 并调整列宽"""
        excel_path = Path(excel_path) if excel_path is not None else self.csv_path.with_suffix(".xlsx")
        self.read().to_excel(excel_path, index=False, engine="openpyxl")
        auto_adjust_columns(excel_path)
        self.logger.info(f"已导出 Excel: {excel_path}")
        return excel_path


class ClassIouTable:
    """各类 IoU 明细，每行一个 (变体, 种子, 分类头, 类别)"""

    def __init__(self, csv_path: Union[str, Path]):
        self.csv_path = Path(csv_path)
        self.logger = logging.getLogger(__name__)
        if not self.csv_path.exists():
            self.csv_path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(columns=CLASS_IOU_COLUMNS).to_csv(self.csv_path, index=False)
            self.logger.info(f"创建各类 IoU 明细文件: {self.csv_path}")

    def add_records(self, variant: str, seed: int, head: str, ious: List[float]):
        rows = pd.DataFrame([{"variant": variant, "seed": seed, "head": head, "class_id": m, "iou": iou}
                             for m, iou in enumerate(ious)], columns=CLASS_IOU_COLUMNS)
        rows.to_csv(self.csv_path, mode="a", header=False, index=False, float_format="%.6f")
        self.logger.debug(f"记录各类 IoU: {variant} seed={seed} {head}")

    def read(self) -> pd.DataFrame:
        return pd.read_csv(self.csv_path)


def auto_adjust_columns(excel_path: Union[str, Path]):
    """自动调整 Excel 列宽；失败只记警告"""
    try:
        wb = load_workbook(excel_path)
        ws = wb.active
        for column in ws.columns:
            max_length = max((len(str(cell.value)) for cell in column if cell.value is not None), default=0)
            ws.column_dimensions[get_column_letter(column[0].column)].width = min(max_length + 2, 50)
        wb.save(excel_path)
    except Exception as e:
        logger.warning(f"调整列宽时出错: {e}")


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """按变体取中位数，保持变体首次出现的顺序"""
    order = list(dict.fromkeys(results["variant"]))
    summary = results.groupby("variant", sort=False).agg(
        runs=("seed", "count"),
        coarse_median=("coarse_miou", "median"),
        refined_median=("refined_miou", "median"),
    )
    return summary.reindex(order)


@dataclass
class TrendResult:
    checks: List[Tuple[str, Optional[bool]]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(ok is True for _, ok in self.checks)


def check_trend(summary: pd.DataFrame, suffix: str = "") -> TrendResult:
    """检查中位数 mIoU 的期望顺序；缺少变体的检查项记为 None"""
    medians: Dict[str, float] = summary["refined_median"].to_dict()

    def get(name: str) -> Optional[float]:
        value = medians.get(name + suffix)
        return None if value is None or math.isnan(value) else value

    def compare(desc: str, left: str, right: str, op, margin: float = 0.0):
        a, b = get(left), get(right)
        ok = None if a is None or b is None else bool(op(a - b, margin))
        result.checks.append((desc, ok))

    result = TrendResult()
    gt, ge = (lambda d, m: d > m), (lambda d, m: d >= m)
    compare("class-ds:1.0 > class-sim", "class-ds:1.0", "class-sim", gt)
    compare("class-sim > plain-gcn", "class-sim", "plain-gcn", gt)
    compare("plain-gcn ≥ none", "plain-gcn", "none", ge)
    compare(f"class-ds:1.0 − none ≥ {MIN_GAIN}", "class-ds:1.0", "none", ge, MIN_GAIN)
    compare("class-ds:1.0 ≥ class-ds:0.2", "class-ds:1.0", "class-ds:0.2", ge)
    return result


HTML_TEMPLATE = """
<!DOCTYPE html>
<html lang="zh-CN">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>CDGC 消融实验报告</title>
    <style>
        body {
            font-family: -apple-system, BlinkMacSystemFont, "Segoe UI", Roboto, "Helvetica Neue", Arial, sans-serif;
            line-height: 1.6;
            color: #333;
            max-width: 1200px;
            margin: 0 auto;
            padding: 20px;
            background-color: #f5f5f5;
        }
        h1, h2 { color: #2c3e50; }
        .summary, .section {
            background-color: #fff;
            padding: 20px;
            border-radius: 8px;
            box-shadow: 0 2px 4px rgba(0,0,0,0.1);
            margin-bottom: 30px;
        }
        .stats {
            display: grid;
            grid-template-columns: repeat(auto-fit, minmax(200px, 1fr));
            gap: 20px;
        }
        .stat-card {
            background-color: #f8f9fa;
            padding: 20px;
            border-radius: 8px;
            text-align: center;
        }
        .stat-number { font-size: 2em; font-weight: bold; color: #3498db; }
        .stat-label { color: #7f8c8d; margin-top: 5px; }
        table { border-collapse: collapse; width: 100%; }
        th, td { padding: 6px 12px; border-bottom: 1px solid #ecf0f1; text-align: right; }
        th:first-child, td:first-child { text-align: left; }
        .ok { color: #27ae60; font-weight: bold; }
        .fail { color: #e74c3c; font-weight: bold; }
        .skip { color: #7f8c8d; }
        .timestamp { text-align: right; color: #7f8c8d; font-size: 0.9em; margin-top: 20px; }
    </style>
</head>
<body>
    <h1>📊 CDGC 消融实验报告</h1>

    <div class="summary">
        <div class="stats">
            <div class="stat-card">
                <div class="stat-number">{{ num_variants }}</div>
                <div class="stat-label">变体数</div>
            </div>
            <div class="stat-card">
                <div class="stat-number">{{ num_runs }}</div>
                <div class="stat-label">训练次数</div>
            </div>
            <div class="stat-card">
                <div class="stat-number">{{ best_variant }}</div>
                <div class="stat-label">最佳变体</div>
            </div>
            <div class="stat-card">
                <div class="stat-number {% if trend_passed %}ok{% else %}fail{% endif %}">{% if trend_passed %}✅{% else %}❌{% endif %}</div>
                <div class="stat-label">趋势检查</div>
            </div>
        </div>
    </div>

    <div class="section">
        <h2>📈 各变体中位数 mIoU</h2>
        <table>
            <tr><th>变体</th><th>次数</th><th>粗预测</th><th>精细预测</th></tr>
            {% for row in rows %}
            <tr>
                <td>{{ row.variant }}</td>
                <td>{{ row.runs }}</td>
                <td>{{ "%.4f"|format(row.coarse_median) }}</td>
                <td>{{ "%.4f"|format(row.refined_median) }}</td>
            </tr>
            {% endfor %}
        </table>
    </div>

    {% if class_rows %}
    <div class="section">
        <h2>🧩 各类 IoU（中位数）</h2>
        <table>
            <tr><th>变体</th><th>分类头</th>{% for m in class_ids %}<th>类别 {{ m }}</th>{% endfor %}</tr>
            {% for row in class_rows %}
            <tr>
                <td>{{ row.variant }}</td>
                <td>{{ row.head }}</td>
                {% for value in row.ious %}<td>{% if value is none %}-{% else %}{{ "%.4f"|format(value) }}{% endif %}</td>{% endfor %}
            </tr>
            {% endfor %}
        </table>
    </div>
    {% endif %}

    <div class="section">
        <h2>🔍 趋势检查</h2>
        <ul>
        {% for desc, ok in checks %}
            <li>{{ desc }}：{% if ok is none %}<span class="skip">未评估</span>{% elif ok %}<span class="ok">通过</span>{% else %}<span class="fail">未通过</span>{% endif %}</li>
        {% endfor %}
        </ul>
    </div>

    <div class="timestamp">生成时间: {{ timestamp }}</div>
</body>
</html>
"""


def _class_rows(class_iou: Optional[pd.DataFrame]) -> Tuple[List[int], List[dict]]:
    if class_iou is None or class_iou.empty:
        return [], []
    medians = class_iou.groupby(["variant", "head", "class_id"], sort=False)["iou"].median()
    class_ids = sorted(class_iou["class_id"].unique().tolist())
    rows = []
    for (variant, head), group in medians.groupby(level=[0, 1], sort=False):
        values = group.droplevel([0, 1])
        ious = [None if m not in values.index or pd.isna(values[m]) else float(values[m]) for m in class_ids]
        rows.append({"variant": variant, "head": head, "ious": ious})
    return class_ids, rows


def generate_html_report(summary: pd.DataFrame, trend: TrendResult,
                         output_path: Union[str, Path], class_iou: Optional[pd.DataFrame] = None) -> Path:
    """生成 HTML 格式的消融报告"""
    rows = [{"variant": name, **row} for name, row in summary.to_dict(orient="index").items()]
    class_ids, class_rows = _class_rows(class_iou)
    best = summary["refined_median"].idxmax() if summary["refined_median"].notna().any() else "-"
    template = Template(HTML_TEMPLATE)
    html_content = template.render(
        num_variants=len(summary),
        num_runs=int(summary["runs"].sum()),
        best_variant=best,
        trend_passed=trend.passed,
        rows=rows,
        class_ids=class_ids,
        class_rows=class_rows,
        checks=trend.checks,
        timestamp=datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
    )
    output_path = Path(output_path)
    with open(output_path, "w", encoding="utf-8") as f:
        f.write(html_content)
    logger.info(f"报告已生成: {output_path}")
    return output_path
