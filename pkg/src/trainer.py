"""
trainer.py
小批量训练循环与评估：打乱（带种子）→ 前向 → 交叉熵 → 反向 → 优化器更新
"""

import os
import time
from typing import Iterator, Optional

import numpy as np

from arch_spec import ArchSpec
from data_io import Dataset, augment_batch
from errors import DomainError, NonFiniteLossError, StateError
from layers import Model, cross_entropy
from logger_config import logger
from model_builder import save_checkpoint
from optimizers import build_optimizer, lr_at
from settings import Settings
from state import EpochRecord, PipelineState, RunLog, TrainConfig, error_update

CHECKPOINT_NAME = "best.npz"


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """每个 epoch 一次随机置换，按 batch_size 切片产出样本下标"""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax 取第一个最大值，即平局时取最小类别下标
    predictions = np.argmax(logits, axis=1)
    return 100.0 * float(np.mean(predictions == labels))


def _model_dtype(model: Model):
    params = model.parameters()
    return params[0].value.dtype if params else np.float64


def evaluate(model: Model, dataset: Dataset, batch_size: int = Settings.EVAL_BATCH_SIZE) -> float:
    """top-1 准确率（百分比）"""
    if len(dataset) == 0:
        raise DomainError("无法在空数据集上评估")
    images = dataset.images.astype(_model_dtype(model), copy=False)
    return accuracy_from_logits(model.predict_logits(images, batch_size), dataset.labels)


def train(model: Model, dataset: Dataset, config: TrainConfig, test_set: Optional[Dataset] = None,
          arch: Optional[ArchSpec] = None, checkpoint_path: Optional[str] = None) -> RunLog:
    """
    训练 config.epochs 轮，每轮 ceil(N / batch_size) 次迭代
    提供 test_set 时每轮评估一次，并在测试准确率创新高时保存检查点（需同时给出 arch 与 checkpoint_path）
    没有 test_set 时在训练结束后保存最终模型
    :raises NonFiniteLossError: 损失出现 NaN/Inf，错误信息中给出首个产生非有限激活的层
    """
    if len(dataset) == 0:
        raise DomainError("训练集为空")
    if config.augment and dataset.images.ndim != 4:
        raise StateError("数据增强只支持 [N, C, H, W] 图像")
    dtype = _model_dtype(model)
    images = dataset.images.astype(dtype, copy=False)
    labels = dataset.labels
    n = len(dataset)
    shuffle_rng = np.random.default_rng(config.seed)
    augment_rng = np.random.default_rng([config.seed, 1])
    optimizer = build_optimizer(config, model.parameters())
    run_log = RunLog(seed=config.seed, config=config.to_dict())
    save = arch is not None and checkpoint_path is not None

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        started = time.perf_counter()
        loss_sum, correct = 0.0, 0
        for index in iterate_minibatches(n, config.batch_size, shuffle_rng):
            x, y = images[index], labels[index]
            if config.augment:
                x = augment_batch(x, augment_rng)
            model.zero_grad()
            logits = model.forward(x)
            loss, grad = cross_entropy(logits, y)
            if not np.isfinite(loss):
                layer = model.locate_non_finite(x) or "loss"
                raise NonFiniteLossError(f"epoch {epoch} 出现非有限损失，首个非有限激活来自层 {layer}",
                                         layer_name=layer, epoch=epoch)
            model.backward(grad)
            optimizer.step(lr)
            loss_sum += loss * len(index)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))

        test_acc = evaluate(model, test_set) if test_set is not None else None
        record = EpochRecord(epoch=epoch, lr=lr, train_loss=loss_sum / n, train_acc=100.0 * correct / n,
                             test_acc=test_acc, wall_time=time.perf_counter() - started)
        run_log.add(record)
        test_text = f"{test_acc:.2f}%" if test_acc is not None else "-"
        logger.info(f"📈 epoch {epoch + 1}/{config.epochs} lr={lr:.5f} loss={record.train_loss:.4f} "
                    f"train_acc={record.train_acc:.2f}% test_acc={test_text} ({record.wall_time:.1f}s)")

        if test_acc is not None and (run_log.best_test_acc is None or test_acc > run_log.best_test_acc):
            run_log.best_test_acc, run_log.best_epoch = test_acc, epoch
            if save:
                run_log.checkpoint_path = save_checkpoint(
                    checkpoint_path, model, arch,
                    {"epoch": epoch, "test_acc": test_acc, "seed": config.seed, "precision": config.precision},
                )

    run_log.final_test_acc = run_log.records[-1].test_acc
    if save and test_set is None:
        run_log.checkpoint_path = save_checkpoint(
            checkpoint_path, model, arch,
            {"epoch": config.epochs - 1, "seed": config.seed, "precision": config.precision},
        )
    return run_log


def train_node(state: PipelineState) -> dict:
    """训练节点"""
    logger.info("🏋️⚙️ [训练节点启动，开始小批量训练...]")
    try:
        command = state["command"]
        config = state["train_config"]
        checkpoint_path = os.path.join(command.out_dir, CHECKPOINT_NAME)
        run_log = train(state["model"], state["train_set"], config, state["test_set"],
                        arch=state["arch"], checkpoint_path=checkpoint_path)
        if state.get("cost_report") is not None:
            run_log.cost_totals = state["cost_report"].totals()
        logger.info(f"✅ 训练完成：最终测试准确率 {run_log.final_test_acc}，最佳 {run_log.best_test_acc} "
                    f"(epoch {run_log.best_epoch})")
        return {
            "run_log": run_log,
            "accuracy": run_log.final_test_acc,
            "messages": [f"train: {len(run_log.records)} epochs, final_test_acc={run_log.final_test_acc}"],
        }
    except Exception as e:
        logger.error(f"训练失败: {e}", exc_info=True)
        return error_update(e)


def evaluate_node(state: PipelineState) -> dict:
    """评估节点"""
    logger.info("🎯🧪 [评估节点启动，正在计算测试集准确率...]")
    try:
        accuracy = evaluate(state["model"], state["test_set"])
        logger.info(f"✅ 测试集 top-1 准确率: {accuracy:.2f}%")
        return {"accuracy": accuracy, "messages": [f"evaluate: {accuracy:.4f}%"]}
    except Exception as e:
        logger.error(f"评估失败: {e}", exc_info=True)
        return error_update(e)
