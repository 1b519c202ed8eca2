"""
main.py
命令行入口：analyze / train / eval / compare / sweep
成功退出码 0；出错时向 stderr 输出一行 "error: category=<类别> message=<信息>"，
退出码 1（一般错误）、3（非有限损失）；参数用法错误由 argparse 以退出码 2 结束
"""

import argparse
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

from arch_builder import build_from_config
from arch_spec import ArchSpec, shape_walk
from cost_analyzer import (
    BaselineRecord, FlopsConvention, analyze, cross_check, flops_in, format_cost_table, score, score_totals,
    tradeoff_sweep, write_cost_report,
)
from data_io import DATASETS
from errors import ConfigError, MissingFieldError, TissueNetError
from graph_builder import build_eval_graph, build_train_graph
from json_util import load_json_file
from logger_config import logger
from model_builder import load_checkpoint
from report_writer import format_table, make_header, write_csv, write_json
from settings import Settings
from state import CommandConfig, OPTIMIZERS, PRECISIONS, SCHEDULES, TrainConfig, create_initial_state

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NON_FINITE = 3
SWEEP_COLUMNS = ("strategy", "c_h", "params", "flops_mac", "flops_2mac")


def parse_shape(text: str) -> Tuple[int, ...]:
    """"3x32x32" -> (3, 32, 32)"""
    try:
        shape = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"形状应写成 CxHxW，例如 3x32x32: {text}")
    if not shape or any(v < 1 for v in shape):
        raise argparse.ArgumentTypeError(f"形状各维必须为正整数: {text}")
    return shape


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"应为逗号分隔的整数: {text}")


def load_arch_file(path: str, input_shape: Optional[Sequence[int]] = None) -> Tuple[ArchSpec, Dict[str, Any], Dict[str, Any]]:
    """
    读取架构文件（显式形式或生成器形式）
    :return: (ArchSpec, train 段, 原始 JSON)
    """
    data = load_json_file(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: 架构文件顶层必须是 JSON 对象")
    train_section = data.get("train") or {}
    if not isinstance(train_section, dict):
        raise ConfigError(f"{path}: train 段必须是 JSON 对象")
    try:
        if "builder" in data:
            spec = dict(data)
            if input_shape:
                spec["input_shape"] = list(input_shape)
            arch = build_from_config(spec)
        else:
            spec = {k: v for k, v in data.items() if k != "train"}
            if input_shape:
                spec["input_shape"] = list(input_shape)
            arch = ArchSpec.from_dict(spec)
            shape_walk(arch)
    except TissueNetError as e:
        raise e.add_context(path)
    return arch, train_section, data


class TissueNetRunner:
    """把命令行参数翻译成 CommandConfig 并执行对应子命令"""

    def __init__(self):
        self.train_graph = None
        self.eval_graph = None

    def run(self, args: argparse.Namespace) -> int:
        handler = {
            "analyze": self.analyze,
            "train": self.train,
            "eval": self.evaluate,
            "compare": self.compare,
            "sweep": self.sweep,
        }[args.subcommand]
        return handler(args)

    # ---------- analyze ----------
    def analyze(self, args) -> int:
        arch, _, _ = load_arch_file(args.arch, args.input_shape)
        command = CommandConfig(subcommand="analyze", arch_file=args.arch, input_shape=args.input_shape,
                                out_dir=args.out, flops_convention=args.flops_convention)
        report = analyze(arch)
        checks = cross_check(arch) if args.cross_check else None
        header = make_header({"command": command.to_dict(), "arch": arch.to_dict()}, arch.seed, "analyze")
        files = write_cost_report(report, args.out, header, checks)
        print(format_cost_table(report, checks))
        for path in files:
            logger.info(f"💾 已写出 {path}")
        if checks is not None and not all(c.passed for c in checks):
            failed = [c.name for c in checks if not c.passed]
            raise TissueNetError(f"闭式成本与构建层计数不一致: {failed}")
        return EXIT_OK

    # ---------- train ----------
    def train(self, args) -> int:
        arch, train_section, _ = load_arch_file(args.arch)
        overrides = {
            "epochs": args.epochs, "seed": args.seed, "batch_size": args.batch_size, "lr0": args.lr,
            "optimizer": args.optimizer, "warmup_epochs": args.warmup, "schedule": args.schedule,
            "precision": args.precision, "weight_decay": args.weight_decay,
            "augment": True if args.augment else None,
        }
        train_config = TrainConfig.resolve(train_section, overrides)
        command = CommandConfig(
            subcommand="train", arch_file=args.arch, dataset=args.dataset, data_dir=args.data_dir,
            out_dir=args.out, seed=train_config.seed, baseline_file=args.baseline,
            train_overrides={k: v for k, v in overrides.items() if v is not None},
            subset=args.subset, flops_convention=args.flops_convention,
        )
        if args.baseline and not os.path.exists(args.baseline):
            raise ConfigError(f"基线记录文件不存在: {args.baseline}")
        os.makedirs(args.out, exist_ok=True)
        if self.train_graph is None:
            self.train_graph = build_train_graph()
        result = self.train_graph.invoke(create_initial_state(command, train_config, arch))
        return self._finish(result)

    # ---------- eval ----------
    def evaluate(self, args) -> int:
        command = CommandConfig(subcommand="eval", checkpoint=args.checkpoint, dataset=args.dataset,
                                data_dir=args.data_dir, out_dir=args.out, seed=args.seed)
        os.makedirs(args.out, exist_ok=True)
        if self.eval_graph is None:
            self.eval_graph = build_eval_graph()
        result = self.eval_graph.invoke(create_initial_state(command))
        if not result.get("has_error"):
            print(f"accuracy: {result['accuracy']:.4f}")
        return self._finish(result)

    # ---------- compare ----------
    def compare(self, args) -> int:
        baseline = BaselineRecord.from_dict(load_json_file(args.baseline))
        acc_n, totals = self._load_run_record(args.run)
        if totals is None:
            # 扁平记录 {acc, flops, params}：FLOPs 视为已按所选口径给出
            record = BaselineRecord.from_dict(load_json_file(args.run))
            acc_n = record.acc_b
            scores = score(record.acc_b, record.flops_b, record.param_b, baseline)
            flops_n, params_n = record.flops_b, record.param_b
        else:
            scores = score_totals(acc_n, totals, baseline, args.flops_convention)
            flops_n, params_n = flops_in(int(totals["flops_mac"]), args.flops_convention), totals["params"]
        command = CommandConfig(subcommand="compare", run_file=args.run, baseline_file=args.baseline,
                                out_dir=args.out, flops_convention=args.flops_convention)
        header = make_header({"command": command.to_dict()}, None, "compare")
        payload = {
            "inputs": {"acc_n": acc_n, "flops_n": flops_n, "param_n": params_n,
                       "acc_b": baseline.acc_b, "flops_b": baseline.flops_b, "param_b": baseline.param_b,
                       "flops_convention": args.flops_convention},
            "ce": scores.ce,
            "se": scores.se,
        }
        path = write_json(os.path.join(args.out, "compare.json"), header, payload)
        logger.info(f"💾 已写出 {path}")
        print(f"CE={scores.ce:.4f} SE={scores.se:.4f}")
        return EXIT_OK

    @staticmethod
    def _load_run_record(path: str):
        """
        检查点：准确率取自元数据，成本由其架构重新统计
        汇总 JSON（train 的 summary.json）：取 final_test_acc 与 cost
        其他 JSON 返回 (None, None)，由调用方按扁平记录处理
        """
        if path.endswith(".npz"):
            _, arch, meta = load_checkpoint(path)
            if meta.get("test_acc") is None:
                raise MissingFieldError(f"检查点 {path} 的元数据中没有 test_acc")
            return float(meta["test_acc"]), analyze(arch).totals()
        data = load_json_file(path)
        if isinstance(data, dict) and isinstance(data.get("cost"), dict) and data["cost"]:
            if data.get("final_test_acc") is None:
                raise MissingFieldError(f"{path} 缺少 final_test_acc")
            return float(data["final_test_acc"]), data["cost"]
        return None, None

    # ---------- sweep ----------
    def sweep(self, args) -> int:
        data = load_json_file(args.arch)
        if not isinstance(data, dict) or "builder" not in data:
            raise ConfigError(f"{args.arch}: sweep 只支持生成器形式的架构文件")
        rows = tradeoff_sweep(data, args.c_h, args.strategies.split(","))
        table = [[row[c] for c in SWEEP_COLUMNS] for row in rows]
        command = CommandConfig(subcommand="sweep", arch_file=args.arch, out_dir=args.out)
        header = make_header({"command": command.to_dict(), "c_h": args.c_h, "strategies": args.strategies},
                             None, "sweep")
        path = write_csv(os.path.join(args.out, "sweep.csv"), header, SWEEP_COLUMNS, table)
        logger.info(f"💾 已写出 {path}")
        print(format_table(SWEEP_COLUMNS, table))
        return EXIT_OK

    @staticmethod
    def _finish(result: Dict[str, Any]) -> int:
        if result.get("has_error"):
            category = result.get("error_category") or "internal"
            report_error(category, result.get("error_message") or "")
            return EXIT_NON_FINITE if category == "non-finite" else EXIT_ERROR
        return EXIT_OK


def report_error(category: str, message: str):
    message = " ".join(str(message).split())
    print(f"error: category={category} message={message}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=Settings.TOOL_NAME, description="TissueNet 紧凑网络：成本分析、训练、评估与效率对比")
    parser.add_argument("--version", action="version", version=f"%(prog)s {Settings.TOOL_VERSION}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    conventions = [c.value for c in FlopsConvention]

    p = sub.add_parser("analyze", help="统计架构的参数量与 FLOPs")
    p.add_argument("--arch", required=True, help="架构 JSON 文件")
    p.add_argument("--input-shape", type=parse_shape, default=None, help="覆盖输入形状，如 3x32x32")
    p.add_argument("--out", default=Settings.OUTPUT_DIR)
    p.add_argument("--cross-check", action="store_true", help="实例化堆叠层，核对闭式成本")
    p.add_argument("--flops-convention", choices=conventions, default=Settings.FLOPS_CONVENTION)

    p = sub.add_parser("train", help="训练模型")
    p.add_argument("--arch", required=True)
    p.add_argument("--dataset", choices=DATASETS, required=True)
    p.add_argument("--data-dir", default=Settings.DATA_DIR)
    p.add_argument("--out", default=Settings.OUTPUT_DIR)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="初始学习率 lr0")
    p.add_argument("--optimizer", choices=OPTIMIZERS + ("sgd",))
    p.add_argument("--warmup", type=int, help="预热轮数")
    p.add_argument("--schedule", choices=SCHEDULES)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--precision", choices=PRECISIONS)
    p.add_argument("--augment", action="store_true", help="随机裁剪 + 水平翻转")
    p.add_argument("--subset", type=int, help="只用训练集中的 n 个样本")
    p.add_argument("--baseline", help="基线记录 JSON，训练结束后计算 CE/SE")
    p.add_argument("--flops-convention", choices=conventions, default=Settings.FLOPS_CONVENTION)

    p = sub.add_parser("eval", help="评估检查点")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", choices=DATASETS, required=True)
    p.add_argument("--data-dir", default=Settings.DATA_DIR)
    p.add_argument("--out", default=Settings.OUTPUT_DIR)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("compare", help="与基线比较，计算 CE / SE")
    p.add_argument("--run", required=True, help="summary.json、检查点 .npz 或 {acc, flops, params} 记录")
    p.add_argument("--baseline", required=True, help="基线记录 JSON")
    p.add_argument("--out", default=Settings.OUTPUT_DIR)
    p.add_argument("--flops-convention", choices=conventions, default=Settings.FLOPS_CONVENTION)

    p = sub.add_parser("sweep", help="遍历 c_h 与替换策略，比较成本")
    p.add_argument("--arch", required=True, help="生成器形式的架构 JSON 文件")
    p.add_argument("--c-h", type=parse_int_list, default=[2, 4, 8, 16])
    p.add_argument("--strategies", default="all")
    p.add_argument("--out", default=Settings.OUTPUT_DIR)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """程序入口：解析参数并执行子命令，返回退出码"""
    args = build_parser().parse_args(argv)
    runner = TissueNetRunner()
    try:
        return runner.run(args)
    except TissueNetError as e:
        logger.error(f"{args.subcommand} 失败: {e}", exc_info=True)
        report_error(e.category, str(e))
        return EXIT_NON_FINITE if e.category == "non-finite" else EXIT_ERROR
    except Exception as e:
        logger.error(f"{args.subcommand} 发生未预期的异常: {e}", exc_info=True)
        report_error("internal", str(e))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
