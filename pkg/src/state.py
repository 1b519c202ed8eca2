from typing import TypedDict, List, Optional, Dict, Any, Annotated, Tuple
import operator
from dataclasses import dataclass, field, asdict, fields

from errors import ConfigError, StateError
from settings import Settings


# ========== 训练配置 ==========
OPTIMIZERS = ("sgd-momentum", "adam")
SCHEDULES = ("constant", "cosine")
PRECISIONS = ("float32", "float64")


@dataclass
class TrainConfig:
    """训练超参数"""
    optimizer: str = Settings.OPTIMIZER  # sgd-momentum | adam
    lr0: float = Settings.LR0  # 初始学习率（0 表示冻结训练）
    momentum: float = Settings.MOMENTUM
    weight_decay: Optional[float] = None  # None 时按优化器取默认值
    adam_beta1: float = Settings.ADAM_BETA1
    adam_beta2: float = Settings.ADAM_BETA2
    adam_epsilon: float = Settings.ADAM_EPSILON
    batch_size: int = Settings.BATCH_SIZE
    epochs: int = Settings.EPOCHS
    warmup_epochs: int = Settings.WARMUP_EPOCHS
    schedule: str = Settings.SCHEDULE  # constant | cosine
    seed: int = Settings.SEED
    augment: bool = False  # 随机裁剪 + 水平翻转（仅 CIFAR 训练集）
    precision: str = Settings.PRECISION

    def __post_init__(self):
        if self.optimizer == "sgd":
            self.optimizer = "sgd-momentum"
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer 必须是 {OPTIMIZERS} 之一: {self.optimizer}")
        if self.weight_decay is None:
            self.weight_decay = Settings.ADAM_WEIGHT_DECAY if self.optimizer == "adam" else Settings.WEIGHT_DECAY
        if self.lr0 < 0:
            raise ConfigError(f"lr0 不能为负: {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum 必须在 [0, 1) 内: {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay 不能为负: {self.weight_decay}")
        if self.adam_epsilon <= 0:
            raise ConfigError(f"adam_epsilon 必须为正: {self.adam_epsilon}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 必须 >= 1: {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs 必须 >= 1: {self.epochs}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} 必须在 [0, epochs={self.epochs}] 内")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule 必须是 {SCHEDULES} 之一: {self.schedule}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision 必须是 {PRECISIONS} 之一: {self.precision}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def resolve(cls, file_section: Optional[Dict[str, Any]] = None,
                overrides: Optional[Dict[str, Any]] = None) -> "TrainConfig":
        """优先级：命令行 > 配置文件 train 段 > 默认值"""
        known = {f.name for f in fields(cls)}
        merged: Dict[str, Any] = {}
        for source, values in (("配置文件", file_section or {}), ("命令行", overrides or {})):
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"{source}中存在未知的训练参数: {key}")
                if value is not None:
                    merged[key] = value
        epochs = merged.get("epochs", Settings.EPOCHS)
        if "warmup_epochs" not in merged and Settings.WARMUP_EPOCHS > epochs:
            # 未显式指定预热且总轮数不足时不预热
            merged["warmup_epochs"] = 0
        return cls(**merged)


# ========== 训练日志 ==========
@dataclass
class EpochRecord:
    """单个 epoch 的记录"""
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: Optional[float]
    wall_time: float  # 秒

    COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_acc", "wall_time")

    def as_row(self) -> List[Any]:
        return [self.epoch, self.lr, self.train_loss, self.train_acc,
                "" if self.test_acc is None else self.test_acc, self.wall_time]


@dataclass
class RunLog:
    """一次训练的完整记录"""
    seed: int
    config: Dict[str, Any]
    records: List[EpochRecord] = field(default_factory=list)
    best_test_acc: Optional[float] = None
    best_epoch: Optional[int] = None
    final_test_acc: Optional[float] = None
    checkpoint_path: Optional[str] = None
    cost_totals: Dict[str, Any] = field(default_factory=dict)
    scores: Dict[str, Any] = field(default_factory=dict)

    def add(self, record: EpochRecord):
        if record.epoch != len(self.records):
            raise StateError(f"epoch 记录必须按顺序且只出现一次: 期望 {len(self.records)}，实际 {record.epoch}")
        self.records.append(record)

    @property
    def losses(self) -> List[float]:
        return [r.train_loss for r in self.records]

    def summary(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "epochs": len(self.records),
            "final_train_loss": self.records[-1].train_loss if self.records else None,
            "final_train_acc": self.records[-1].train_acc if self.records else None,
            "final_test_acc": self.final_test_acc,
            "best_test_acc": self.best_test_acc,
            "best_epoch": self.best_epoch,
            "checkpoint": self.checkpoint_path,
            "cost": self.cost_totals,
            "scores": self.scores,
        }


# ========== 命令配置 ==========
@dataclass
class CommandConfig:
    """CLI 子命令的完整输入"""
    subcommand: str  # analyze | train | eval | compare | sweep
    arch_file: Optional[str] = None
    input_shape: Optional[Tuple[int, ...]] = None
    dataset: Optional[str] = None  # mnist | cifar10 | cifar100 | synth
    data_dir: str = Settings.DATA_DIR
    out_dir: str = Settings.OUTPUT_DIR
    seed: Optional[int] = None
    checkpoint: Optional[str] = None
    run_file: Optional[str] = None
    baseline_file: Optional[str] = None
    train_overrides: Dict[str, Any] = field(default_factory=dict)
    subset: Optional[int] = None  # 只取训练集前 n 个（打乱后）样本
    flops_convention: str = Settings.FLOPS_CONVENTION

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["input_shape"] = list(self.input_shape) if self.input_shape else None
        return data


# ========== 流水线状态定义 ==========
class PipelineState(TypedDict):
    """训练/评估流水线运行时状态（通过 TypedDict 强约束结构）"""
    command: CommandConfig
    train_config: Optional[TrainConfig]

    # 数据与模型
    arch: Optional[Any]  # ArchSpec
    train_set: Optional[Any]  # Dataset
    test_set: Optional[Any]  # Dataset
    model: Optional[Any]  # Model
    checkpoint_meta: Optional[Dict[str, Any]]

    # 结果
    cost_report: Optional[Any]  # CostReport
    run_log: Optional[RunLog]
    accuracy: Optional[float]
    output_files: Annotated[List[str], operator.add]  # 已写出的文件（支持累加）

    # 执行轨迹
    messages: Annotated[List[str], operator.add]  # 节点消息（支持累加）

    # 执行状态
    has_error: bool  # 是否发生错误
    error_message: Optional[str]  # 错误信息（可选）
    error_category: Optional[str]  # 机器可读的错误类别


def create_initial_state(command: CommandConfig, train_config: Optional[TrainConfig] = None,
                         arch: Any = None) -> PipelineState:
    """创建流水线初始状态"""
    return PipelineState(
        command=command,
        train_config=train_config,
        arch=arch,
        train_set=None,
        test_set=None,
        model=None,
        checkpoint_meta=None,
        cost_report=None,
        run_log=None,
        accuracy=None,
        output_files=[],
        messages=[],
        has_error=False,
        error_message=None,
        error_category=None,
    )


def error_update(error: Exception) -> Dict[str, Any]:
    """节点捕获异常后写回状态的字段"""
    return {
        "has_error": True,
        "error_message": str(error),
        "error_category": getattr(error, "category", "internal"),
    }
