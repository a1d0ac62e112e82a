"""
错误类型定义
每一类错误带有类别名和CLI退出码
"""


class SurvDGError(Exception):
    """所有领域错误的基类"""

    category = "error"
    exit_code = 1


class ShapeError(SurvDGError, ValueError):
    category = "shape"
    exit_code = 3


class ParameterError(SurvDGError, ValueError):
    category = "parameter"
    exit_code = 4


class InsufficientBatchError(SurvDGError, ValueError):
    category = "batch"
    exit_code = 5


class NumericError(SurvDGError, ArithmeticError):
    """数值错误，可携带出错时的各项数值"""

    category = "numeric"
    exit_code = 6

    def __init__(self, message: str, terms: dict = None):
        super().__init__(message)
        self.terms = dict(terms or {})


class UndefinedMetricError(SurvDGError, ValueError):
    category = "metric"
    exit_code = 7


class SchemaError(SurvDGError, ValueError):
    """数据文件结构错误，指明文件和字段"""

    category = "schema"
    exit_code = 8

    def __init__(self, path, field: str, message: str):
        super().__init__(f"{path}: {field}: {message}")
        self.path = str(path)
        self.field = field


class DataError(SurvDGError, ValueError):
    """数据内容错误，指明行号"""

    category = "data"
    exit_code = 9

    def __init__(self, path, row: int, message: str):
        super().__init__(f"{path}: row {row}: {message}")
        self.path = str(path)
        self.row = row


class ConfigError(SurvDGError, ValueError):
    category = "config"
    exit_code = 10


class OutputError(SurvDGError, OSError):
    category = "io"
    exit_code = 11
