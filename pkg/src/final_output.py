"""
final_output.py
最终输出节点：把训练/评估结果写成带头部块的文件（epoch 日志 CSV、汇总 JSON、成本报告）
"""

import os
from dataclasses import asdict

from cost_analyzer import BaselineRecord, score_totals, write_cost_report
from json_util import load_json_file
from logger_config import logger
from report_writer import make_header, write_csv, write_json
from state import EpochRecord, PipelineState, error_update


def _header(state: PipelineState) -> dict:
    command = state["command"]
    train_config = state.get("train_config")
    config = {"command": command.to_dict()}
    if train_config is not None:
        config["train"] = train_config.to_dict()
    if state.get("arch") is not None:
        config["arch"] = state["arch"].to_dict()
    seed = train_config.seed if train_config is not None else command.seed
    return make_header(config, seed, command.subcommand)


def _write_train_outputs(state: PipelineState, header: dict) -> list:
    command = state["command"]
    run_log = state["run_log"]
    files = [
        write_csv(os.path.join(command.out_dir, "epochs.csv"), header, EpochRecord.COLUMNS,
                  [r.as_row() for r in run_log.records]),
    ]
    if state.get("cost_report") is not None:
        files += write_cost_report(state["cost_report"], command.out_dir, header)
    if command.baseline_file:
        baseline = BaselineRecord.from_dict(load_json_file(command.baseline_file))
        scores = score_totals(run_log.final_test_acc, run_log.cost_totals, baseline, command.flops_convention)
        run_log.scores = {"ce": scores.ce, "se": scores.se, "baseline": asdict(baseline),
                          "flops_convention": command.flops_convention}
        logger.info(f"📊 CE={scores.ce:.4f} SE={scores.se:.4f}（基线 {command.baseline_file}）")
    files.append(write_json(os.path.join(command.out_dir, "summary.json"), header, run_log.summary()))
    return files


def _write_eval_outputs(state: PipelineState, header: dict) -> list:
    command = state["command"]
    payload = {
        "checkpoint": command.checkpoint,
        "dataset": command.dataset,
        "accuracy": state["accuracy"],
        "checkpoint_meta": state.get("checkpoint_meta") or {},
    }
    return [write_json(os.path.join(command.out_dir, "eval.json"), header, payload)]


def final_output_node(state: PipelineState) -> dict:
    """整理并写出结果文件；流水线出错时只记录错误，不写结果"""
    logger.info("🚀📢 [结果输出节点启动，正在整理输出...]")
    if state.get("has_error"):
        logger.error(f"❌ 流水线失败 category={state.get('error_category')} message={state.get('error_message')}")
        return {"messages": [f"final_output: error ({state.get('error_category')})"]}
    try:
        header = _header(state)
        if state["command"].subcommand == "train":
            files = _write_train_outputs(state, header)
        else:
            files = _write_eval_outputs(state, header)
        for path in files:
            logger.info(f"💾 已写出 {path}")
        return {"output_files": files, "messages": [f"final_output: {len(files)} files"]}
    except Exception as e:
        logger.error(f"结果输出失败: {e}", exc_info=True)
        return error_update(e)
