import os
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()


def _float_env(name: str, default: float) -> float:
    value = os.getenv(name)
    return float(value) if value not in (None, "") else default


def _int_env(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


class Settings:
    """应用配置管理"""
    TOOL_NAME = "tissuenet"
    TOOL_VERSION = "0.3.0"

    # 路径配置
    DATA_DIR = os.getenv("TISSUENET_DATA_DIR", "data")  # 数据集根目录
    OUTPUT_DIR = os.getenv("TISSUENET_OUTPUT_DIR", "runs")  # 运行输出目录
    LOG_FILE = os.getenv("TISSUENET_LOG_FILE", "tissuenet.log")  # 日志文件
    LOG_LEVEL = os.getenv("TISSUENET_LOG_LEVEL", "INFO")

    # 基本单元默认形状 {c_in', c_h, c_out'}
    UNIT_IN = 2
    UNIT_HIDDEN = 4
    UNIT_OUT = 2
    HYBRID_MAX_RETRIES = 100  # 混合单元随机抽取的最大重试次数

    # 训练默认值
    SEED = _int_env("TISSUENET_SEED", 0)
    EPOCHS = _int_env("TISSUENET_EPOCHS", 30)
    BATCH_SIZE = _int_env("TISSUENET_BATCH_SIZE", 128)
    OPTIMIZER = "sgd-momentum"  # sgd-momentum | adam
    LR0 = _float_env("TISSUENET_LR0", 0.1)  # 初始学习率
    MOMENTUM = 0.9
    WEIGHT_DECAY = 0.0
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPSILON = 0.01
    ADAM_WEIGHT_DECAY = 1e-4
    WARMUP_EPOCHS = _int_env("TISSUENET_WARMUP_EPOCHS", 10)  # 线性预热轮数
    SCHEDULE = "cosine"  # cosine | constant
    PRECISION = os.getenv("TISSUENET_PRECISION", "float32")  # 训练精度
    EVAL_BATCH_SIZE = 500
    CROP_PADDING = 4  # 随机裁剪的填充像素

    # 数据集归一化统计量（按通道）
    MNIST_MEAN = (0.1307,)
    MNIST_STD = (0.3081,)
    CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
    CIFAR10_STD = (0.2470, 0.2435, 0.2616)
    CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
    CIFAR100_STD = (0.2673, 0.2564, 0.2762)

    # 数值检查
    GRAD_CHECK_STEP = 1e-3  # 中心差分步长
    FLOPS_CONVENTION = "2mac"  # 计算 CE/SE 时采用的 FLOPs 口径
