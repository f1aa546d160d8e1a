#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
CDGC 桌面规模实验台
子命令：gen / train / eval / run / sweep / gradcheck / dump-features
每次训练的输出目录包含 metrics.csv、checkpoint/ 与 run.json
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

import tensor_core as tc
from cdgc_errors import CdgcError, ConfigError, DataError
from cdgc_module import class_graph
from cdgc_network import CdgcNet, Variant, parse_variant
from experiment_config import SWEEP_VARIANTS, ExperimentConfig, load_config, setup_logging
from graph_builder import class_masks_from_logits, inference_sample
from gradcheck_suite import GradResult, run_suite
from results_report import (ClassIouTable, ResultsTable, check_trend, generate_html_report,
                            summarize)
from seg_dataset import SegSample, generate_dataset, load_dataset, load_manifest, save_dataset
from seg_metrics import ConfusionMatrix, confusion, miou
from seg_trainer import train
from tensor_core import Rng

logger = logging.getLogger(__name__)

RUN_FILE = "run.json"
METRICS_FILE = "metrics.csv"
CHECKPOINT_DIR = "checkpoint"


@dataclass
class EvalResult:
    coarse_cm: ConfusionMatrix
    refined_cm: ConfusionMatrix
    coarse_miou: float
    refined_miou: float
    coarse_iou: List[float]
    refined_iou: List[float]


def variant_label(variant: Variant, fusion: str) -> str:
    """结果表中的变体名，sum 融合加 @sum 后缀"""
    return variant.name if fusion == "concat" else f"{variant.name}@{fusion}"


def build_model(cfg: ExperimentConfig, variant: Variant, seed: int) -> CdgcNet:
    return CdgcNet.build(cfg.net_config(), cfg.fusion, variant, seed)


def prepare_data(cfg: ExperimentConfig) -> Tuple[List[SegSample], List[SegSample]]:
    """训练集与评估集使用不同的数据种子"""
    common = dict(height=cfg.height, width=cfg.width, num_classes=cfg.num_classes,
                  noise=cfg.noise, in_channels=cfg.in_channels)
    train_set = generate_dataset(cfg.train_samples, seed=cfg.data_seed, **common)
    eval_set = generate_dataset(cfg.eval_samples, seed=cfg.data_seed + 1, **common)
    return train_set, eval_set


def train_variant(cfg: ExperimentConfig, variant: Variant, seed: int, samples: List[SegSample],
                  run_dir: Union[str, Path]) -> CdgcNet:
    """训练一个变体，写出指标流、检查点和运行描述"""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, variant, seed)
    # 子流 0、1 用于初始化，子流 2 用于训练
    train_rng = Rng(seed).split(3)[2]
    train(model, samples, cfg.train_config(), train_rng, run_dir / METRICS_FILE)
    model.params.save(run_dir / CHECKPOINT_DIR)
    run_info = {"variant": variant.name, "seed": seed, "config": cfg.to_dict()}
    (run_dir / RUN_FILE).write_text(json.dumps(run_info, ensure_ascii=False, indent=2), encoding="utf-8")
    return model


def load_run(run_dir: Union[str, Path]) -> Tuple[CdgcNet, ExperimentConfig]:
    """按 run.json 重建模型并载入检查点"""
    run_dir = Path(run_dir)
    run_file = run_dir / RUN_FILE
    if not run_file.exists():
        raise DataError(f"运行目录缺少 {RUN_FILE}: {run_dir}")
    info = json.loads(run_file.read_text(encoding="utf-8"))
    cfg = ExperimentConfig(**info["config"])
    model = build_model(cfg, parse_variant(info["variant"], cfg.ratio), int(info["seed"]))
    model.params.load(run_dir / CHECKPOINT_DIR)
    return model, cfg


def evaluate(model: CdgcNet, samples: Sequence[SegSample], ignore_index: int = 255) -> EvalResult:
    """推理只用粗预测掩码；none 变体的精细结果即粗预测结果"""
    m = model.num_classes
    coarse_cm, refined_cm = ConfusionMatrix.zeros(m), ConfusionMatrix.zeros(m)
    for sample in tqdm(samples, desc=f"评估 {model.variant.name}", disable=not samples):
        out = model.forward(sample.image, training=False)
        coarse_pred = np.argmax(out.coarse_logits.data, axis=0)
        coarse_cm.update(confusion(coarse_pred, sample.labels, m, ignore_index))
        logits = out.refined_logits if out.refined_logits is not None else out.coarse_logits
        refined_cm.update(confusion(np.argmax(logits.data, axis=0), sample.labels, m, ignore_index))
    coarse_miou, coarse_iou = miou(coarse_cm)
    refined_miou, refined_iou = miou(refined_cm)
    return EvalResult(coarse_cm, refined_cm, coarse_miou, refined_miou, coarse_iou, refined_iou)


def run_experiment(cfg: ExperimentConfig, variants: Optional[Sequence[str]] = None,
                   seeds: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """对每个变体与种子训练并评估，结果逐行追加到 results.csv"""
    out_dir = Path(cfg.out_dir)
    variants = [parse_variant(v, cfg.ratio) for v in (variants if variants is not None else cfg.variants)]
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    train_set, eval_set = prepare_data(cfg)
    table = ResultsTable(out_dir / "results.csv")
    class_table = ClassIouTable(out_dir / "class_iou.csv")

    for variant in variants:
        label = variant_label(variant, cfg.fusion)
        for seed in seeds:
            logger.info(f"开始实验: {label} seed={seed}")
            model = train_variant(cfg, variant, seed, train_set, out_dir / label / f"seed{seed}")
            result = evaluate(model, eval_set, cfg.ignore_index)
            table.add_record(label, seed, result.coarse_miou, result.refined_miou)
            class_table.add_records(label, seed, "coarse", result.coarse_iou)
            class_table.add_records(label, seed, "refined", result.refined_iou)
    table.export_excel()
    return table.read()


def run_sweep(cfg: ExperimentConfig):
    """消融与采样比例扫描，生成汇总与 HTML 报告"""
    results = run_experiment(cfg, SWEEP_VARIANTS, cfg.seeds)
    summary = summarize(results)
    suffix = "" if cfg.fusion == "concat" else f"@{cfg.fusion}"
    trend = check_trend(summary, suffix)
    class_iou = ClassIouTable(Path(cfg.out_dir) / "class_iou.csv").read()
    report = generate_html_report(summary, trend, Path(cfg.out_dir) / "report.html", class_iou)
    return summary, trend, report


def dump_class_features(model: CdgcNet, sample: SegSample, class_id: int,
                        out_dir: Union[str, Path]) -> List[Path]:
    """写出某一类别图卷积前后的节点特征（C×N）及其邻接矩阵（N×N）"""
    m = model.num_classes
    if not 0 <= class_id < m:
        raise ConfigError(f"class_id={class_id} 超出 0..{m - 1}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    feature, _ = model.net.forward_trunk(sample.image)
    sampled = inference_sample(class_masks_from_logits(model.net.coarse_head(feature)))
    channels, height, width = feature.shape
    num_nodes = height * width
    support = sampled.indices[class_id]
    if len(support) == 0:
        logger.info(f"类别 {class_id} 在该样本的粗预测中没有节点，输出全零")
        before = np.zeros((channels, num_nodes), dtype=np.float32)
        after = np.zeros((channels, num_nodes), dtype=np.float32)
        adjacency = np.zeros((num_nodes, num_nodes), dtype=np.float32)
    else:
        x_flat = tc.reshape(feature, (channels, num_nodes))
        graph = class_graph(x_flat, support, model.cdgc.group_weight(class_id), model.cdgc)
        before, after = graph.dense_nodes(num_nodes), graph.out.data
        adjacency = graph.dense_adjacency(num_nodes)

    paths = []
    for name, value in (("before", before), ("after", after), ("adjacency", adjacency)):
        path = out_dir / f"class{class_id}_{name}.cdt"
        tc.save_tensor(path, value)
        paths.append(path)
    logger.info(f"类别 {class_id} 的特征已导出到 {out_dir}")
    return paths


def run_gradcheck(num_seeds: int, only: Sequence[str] = ()) -> List[GradResult]:
    return run_suite(range(num_seeds), only)


# ---- 命令行 ----
def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    ratio = getattr(args, "ratio", None)
    cfg = cfg.with_overrides(seed=getattr(args, "seed", None), fusion=getattr(args, "fusion", None),
                             ratio=ratio, out_dir=getattr(args, "out", None),
                             steps=getattr(args, "steps", None))
    variant = getattr(args, "variant", None)
    if variant is not None:
        cfg = cfg.with_overrides(variants=[variant])
    return cfg


def cmd_gen(args) -> int:
    cfg = _config_from_args(args)
    print("\n🎨 生成合成数据集")
    print("=" * 50)
    common = dict(height=cfg.height, width=cfg.width, num_classes=cfg.num_classes, noise=cfg.noise,
                  in_channels=cfg.in_channels, ignore_boundary=args.ignore_boundary)
    for split, n, seed in (("train", cfg.train_samples, cfg.data_seed),
                           ("eval", cfg.eval_samples, cfg.data_seed + 1)):
        samples = generate_dataset(n, seed=seed, **common)
        save_dataset(samples, Path(cfg.out_dir) / split, seed=seed, **common)
        print(f"   ✅ {split}: {n} 个样本 → {Path(cfg.out_dir) / split}")
    return 0


def _load_split(data_dir: Optional[str], cfg: ExperimentConfig, split: str) -> List[SegSample]:
    if data_dir is None:
        train_set, eval_set = prepare_data(cfg)
        return train_set if split == "train" else eval_set
    path = Path(data_dir) / split if (Path(data_dir) / split).exists() else Path(data_dir)
    manifest = load_manifest(path)
    if int(manifest.get("num_classes", cfg.num_classes)) != cfg.num_classes:
        raise ConfigError(f"数据集类别数 {manifest.get('num_classes')} 与配置 {cfg.num_classes} 不一致")
    return load_dataset(path)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    variant = cfg.variant_list()[0]
    label = variant_label(variant, cfg.fusion)
    print(f"\n🚀 训练 {label}（seed={cfg.seed}, steps={cfg.steps}）")
    print("=" * 50)
    samples = _load_split(args.data, cfg, "train")
    run_dir = Path(cfg.out_dir) / label / f"seed{cfg.seed}"
    train_variant(cfg, variant, cfg.seed, samples, run_dir)
    print(f"   ✅ 指标: {run_dir / METRICS_FILE}")
    print(f"   ✅ 检查点: {run_dir / CHECKPOINT_DIR}")
    return 0


def _print_eval(label: str, result: EvalResult):
    print(f"\n📊 {label}")
    print(f"   粗预测 mIoU:   {result.coarse_miou:.4f}")
    print(f"   精细预测 mIoU: {result.refined_miou:.4f}")
    for m, (c, r) in enumerate(zip(result.coarse_iou, result.refined_iou)):
        print(f"   类别 {m}: 粗 {c:.4f}  精 {r:.4f}")


def cmd_eval(args) -> int:
    model, cfg = load_run(args.checkpoint)
    samples = _load_split(args.data, cfg, "eval")
    result = evaluate(model, samples, cfg.ignore_index)
    _print_eval(variant_label(model.variant, cfg.fusion), result)
    return 0


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    print("\n🚀 运行实验")
    print("=" * 50)
    results = run_experiment(cfg)
    print(results.to_string(index=False))
    print(f"\n📝 结果已保存到: {Path(cfg.out_dir) / 'results.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    print(f"\n🔬 消融扫描：{len(SWEEP_VARIANTS)} 个变体 × {len(cfg.seeds)} 个种子")
    print("=" * 50)
    summary, trend, report = run_sweep(cfg)
    print(summary.to_string())
    print("\n🔍 趋势检查")
    for desc, ok in trend.checks:
        mark = "⏭️ " if ok is None else ("✅" if ok else "❌")
        print(f"   {mark} {desc}")
    print(f"\n📊 报告已生成: {report}")
    return 0


def cmd_gradcheck(args) -> int:
    print("\n🧮 64 位梯度校验")
    print("=" * 50)
    results = run_gradcheck(args.seeds, args.only or ())
    frame = pd.DataFrame([{"case": r.case, "seed": r.seed, "error": r.error} for r in results])
    worst = frame.groupby("case", sort=False)["error"].max()
    for case, error in worst.items():
        print(f"   {'✅' if error <= 1e-4 else '❌'} {case:<18} 最大相对误差 {error:.2e}")
    failed = [r for r in results if not r.passed]
    print("\n" + "=" * 50)
    print(f"📊 共 {len(results)} 项，失败 {len(failed)} 项")
    return 1 if failed else 0


def cmd_dump(args) -> int:
    model, cfg = load_run(args.checkpoint)
    samples = _load_split(args.data, cfg, "eval")
    if not 0 <= args.sample < len(samples):
        raise ConfigError(f"样本下标 {args.sample} 超出 0..{len(samples) - 1}")
    paths = dump_class_features(model, samples[args.sample], args.class_id, args.out)
    for path in paths:
        print(f"   ✅ {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="CDGC 桌面规模实验台")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML 配置文件")
        p.add_argument("--out", help="输出目录（覆盖 out_dir）")
        return p

    gen = with_config(sub.add_parser("gen", help="生成合成数据集"))
    gen.add_argument("--ignore-boundary", action="store_true", help="类别边界像素标为忽略")
    gen.set_defaults(func=cmd_gen)

    for name, func, help_text in (("train", cmd_train, "训练单个变体"),
                                  ("run", cmd_run, "按配置运行全部变体"),
                                  ("sweep", cmd_sweep, "消融与采样比例扫描")):
        p = with_config(sub.add_parser(name, help=help_text))
        p.add_argument("--seed", type=int, help="随机种子")
        p.add_argument("--fusion", choices=["concat", "sum"], help="融合方式")
        p.add_argument("--ratio", type=float, help="简单正样本采样比例")
        p.add_argument("--steps", type=int, help="训练步数")
        if name != "sweep":
            p.add_argument("--variant", help="none / plain-gcn / class-sim / class-ds:<ratio>")
        if name == "train":
            p.add_argument("--data", help="数据集目录（默认按配置现场生成）")
        p.set_defaults(func=func)

    ev = sub.add_parser("eval", help="评估检查点")
    ev.add_argument("--checkpoint", required=True, help="训练输出目录（含 run.json）")
    ev.add_argument("--data", help="数据集目录（默认按配置现场生成）")
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="运行 64 位梯度校验")
    gc.add_argument("--seeds", type=int, default=20, help="每个用例的种子数")
    gc.add_argument("--only", nargs="*", help="只运行指定用例")
    gc.set_defaults(func=cmd_gradcheck)

    dump = sub.add_parser("dump-features", help="导出某类别图卷积前后的特征")
    dump.add_argument("--checkpoint", required=True, help="训练输出目录（含 run.json）")
    dump.add_argument("--data", help="数据集目录（默认按配置现场生成）")
    dump.add_argument("--sample", type=int, default=0, help="样本下标")
    dump.add_argument("--class-id", type=int, required=True, help="类别编号")
    dump.add_argument("--out", default="features", help="输出目录")
    dump.set_defaults(func=cmd_dump)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数"""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config_path = getattr(args, "config", None)
        setup_logging(load_config(config_path))
        return args.func(args)
    except CdgcError as e:
        logger.error(str(e))
        print(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
