"""领域异常定义。命令行入口将这些异常统一映射为退出码 1。"""
from pathlib import Path
from typing import Optional, Union


class DomainError(ValueError):
    """输入违反前置条件（混合 image_id、圆心越界、非正权重等）。"""


class RecordParseError(ValueError):
    """记录文件中某一行无法解析。"""

    def __init__(
        self,
        path: Union[str, Path],
        line_no: int,
        field: Optional[str],
        message: str,
    ):
        self.path = str(path)
        self.line_no = line_no
        self.field = field
        self.message = message
        where = f"{self.path}:{line_no}"
        if field:
            where += f" 字段 '{field}'"
        super().__init__(f"{where}: {message}")
