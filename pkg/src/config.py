"""
项目全局配置模块。
通过环境变量控制输出目录与各命令行参数的默认值。

每个命令行参数都可以用 ``WCF_<参数名>`` 形式的环境变量覆盖，
例如 ``--ciou-thresh`` 对应 ``WCF_CIOU_THRESH``。优先级：命令行 > 环境变量 > 内置默认值。
"""
import os
from pathlib import Path
from typing import Callable, Optional, Tuple, TypeVar

from dotenv import load_dotenv

load_dotenv()

T = TypeVar("T")

ENV_PREFIX = "WCF_"


def get_output_dir() -> Path:
    """获取输出目录路径，优先使用环境变量 OUTPUT_DIR，默认为 'output'。"""
    output_dir = Path(os.getenv("OUTPUT_DIR", "output"))
    output_dir.mkdir(parents=True, exist_ok=True)
    return output_dir


def env_name(flag: str) -> str:
    """``--t-score`` -> ``WCF_T_SCORE``"""
    return ENV_PREFIX + flag.lstrip("-").replace("-", "_").upper()


def env_default(flag: str, fallback: T, cast: Callable[[str], T]) -> T:
    """读取参数对应的环境变量；未设置时返回内置默认值。"""
    raw = os.getenv(env_name(flag))
    if raw is None or not raw.strip():
        return fallback
    try:
        return cast(raw.strip())
    except ValueError as exc:
        raise ValueError(f"环境变量 {env_name(flag)}={raw!r} 无法解析: {exc}") from exc


def parse_frame(text: str) -> Tuple[float, float]:
    """解析 ``WxH`` 形式的画幅尺寸，如 ``512x512``。"""
    parts = text.lower().replace("×", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"画幅格式应为 WxH，实际为 {text!r}")
    width, height = float(parts[0]), float(parts[1])
    if width <= 0 or height <= 0:
        raise ValueError(f"画幅宽高必须为正数，实际为 {text!r}")
    return width, height


def optional_float(text: str) -> Optional[float]:
    if text.lower() in {"", "none", "off"}:
        return None
    return float(text)


# 与实验设置一致的默认参数
DEFAULT_CIOU_THRESH = 0.5
DEFAULT_T_SCORE = 0.9
DEFAULT_T_COUNT = 2
DEFAULT_SOFTNMS_THRESH = 0.3
DEFAULT_SIGMA = 0.5
DEFAULT_FRAME = "512x512"

# 版本号
VERSION = "1.0.0"
