"""
桌面规模的端到端验收：需要本地 MNIST / CIFAR-10 数据，缺失时跳过
运行：pytest -m slow
"""

import os
from pathlib import Path

import pytest

from cost_analyzer import BaselineRecord, score_totals
from json_util import load_json_file
from main import main
from report_writer import read_csv
from settings import Settings

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
MNIST_DIR = os.path.join(Settings.DATA_DIR, "mnist")
CIFAR10_DIR = os.path.join(Settings.DATA_DIR, "cifar10")

pytestmark = pytest.mark.slow

needs_mnist = pytest.mark.skipif(not os.path.isdir(MNIST_DIR), reason=f"缺少 MNIST 数据目录 {MNIST_DIR}")
needs_cifar10 = pytest.mark.skipif(not os.path.isdir(CIFAR10_DIR), reason=f"缺少 CIFAR-10 数据目录 {CIFAR10_DIR}")


def run_train(config: str, dataset: str, data_dir: str, out: Path, *extra: str) -> dict:
    code = main(["train", "--arch", str(CONFIGS / config), "--dataset", dataset, "--data-dir", data_dir,
                 "--seed", "0", "--out", str(out), *extra])
    assert code == 0
    return load_json_file(str(out / "summary.json"))


@needs_mnist
def test_mnist_mlp_against_own_baseline(tmp_path):
    baseline = run_train("mlp_baseline.json", "mnist", MNIST_DIR, tmp_path / "baseline")
    tissuenet = run_train("mlp_tissuenet.json", "mnist", MNIST_DIR, tmp_path / "tissuenet")

    assert tissuenet["cost"]["flops_2mac_M"] <= 0.03
    assert tissuenet["cost"]["params_M"] <= 0.02
    assert tissuenet["final_test_acc"] >= baseline["final_test_acc"] - 1.5

    record = BaselineRecord(baseline["final_test_acc"], baseline["cost"]["flops_2mac"], baseline["cost"]["params"])
    scores = score_totals(tissuenet["final_test_acc"], tissuenet["cost"], record, "2mac")
    assert scores.ce >= 20
    assert scores.se >= 15


@needs_mnist
def test_mnist_mlp_same_seed_same_losses(tmp_path):
    losses = []
    for run in ("first", "second"):
        run_train("mlp_tissuenet.json", "mnist", MNIST_DIR, tmp_path / run)
        losses.append([float(r["train_loss"]) for r in read_csv(str(tmp_path / run / "epochs.csv"))])
    assert len(losses[0]) > 0
    assert losses[0] == losses[1]


@needs_mnist
def test_lenet_single_unit_accuracy(tmp_path):
    summary = run_train("lenet_tissuenet.json", "mnist", MNIST_DIR, tmp_path / "lenet")
    assert summary["cost"]["flops_mac"] <= 1.3e6
    assert summary["best_test_acc"] >= 97.5


@needs_mnist
def test_lenet_hybrid_trains(tmp_path):
    summary = run_train("lenet_hybrid.json", "mnist", MNIST_DIR, tmp_path / "hybrid", "--epochs", "2")
    assert summary["final_test_acc"] is not None
    assert main(["analyze", "--arch", str(CONFIGS / "lenet_hybrid.json"), "--cross-check",
                 "--out", str(tmp_path / "cost")]) == 0


@needs_cifar10
def test_cifar10_smoke_loss_halves(tmp_path):
    run_train("vgg16_cifar10_smoke.json", "cifar10", CIFAR10_DIR, tmp_path / "smoke", "--subset", "5000")
    losses = [float(r["train_loss"]) for r in read_csv(str(tmp_path / "smoke" / "epochs.csv"))]
    assert len(losses) == 5
    assert losses[-1] <= 0.5 * losses[0]
