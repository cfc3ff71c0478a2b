"""
Custom exceptions для hierbert
Централизованная обработка ошибок; CLI превращает exit_code в код завершения процесса
"""

from typing import Any, Dict, Optional, Sequence


class HierBertError(Exception):
    """Базовый класс для всех исключений пакета"""

    def __init__(
        self,
        message: str,
        exit_code: int = 1,
        error_code: str = "INTERNAL_ERROR",
        details: Optional[Dict[str, Any]] = None
    ):
        self.message = message
        self.exit_code = exit_code
        self.error_code = error_code
        self.details = details or {}
        super().__init__(self.message)


# ============ Configuration Errors ============

class ConfigurationError(HierBertError):
    """Некорректная или противоречивая конфигурация"""
    def __init__(self, message: str, error_code: str = "CONFIG_ERROR", **kwargs):
        super().__init__(message, exit_code=2, error_code=error_code, **kwargs)


class PlacementError(ConfigurationError):
    """Слой головы вне энкодера или не соответствует варианту"""
    def __init__(self, message: str, details: Dict = None):
        super().__init__(message, error_code="INVALID_PLACEMENT", details=details)


class ConcatModeError(ConfigurationError):
    """Режим конкатенации не согласован с вектором предложения"""
    def __init__(self, message: str, details: Dict = None):
        super().__init__(message, error_code="INVALID_CONCAT", details=details)


class HeadDisabledError(ConfigurationError):
    """Вызвана голова, отключённая в этом размещении"""
    def __init__(self, head: str):
        super().__init__(
            f"The {head} head is disabled in this placement",
            error_code="HEAD_DISABLED",
            details={"head": head}
        )


class ParameterError(ConfigurationError):
    """Гиперпараметр вне допустимого диапазона"""
    def __init__(self, name: str, value: Any, allowed: str):
        super().__init__(
            f"Parameter '{name}'={value!r} outside {allowed}",
            error_code="INVALID_PARAMETER",
            details={"name": name, "value": value, "allowed": allowed}
        )


# ============ Tensor Engine Errors ============

class TensorError(HierBertError):
    """Базовая ошибка тензорного движка"""
    def __init__(self, message: str, error_code: str = "TENSOR_ERROR", **kwargs):
        super().__init__(message, exit_code=4, error_code=error_code, **kwargs)


class DimensionError(TensorError):
    """Несовместимые формы операндов"""
    def __init__(self, op: str, *shapes: Sequence[int]):
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(
            f"{op}: incompatible shapes {rendered}",
            error_code="DIMENSION_MISMATCH",
            details={"op": op, "shapes": [list(s) for s in shapes]}
        )


class TapeStateError(TensorError):
    """Лента градиентов использована повторно"""
    def __init__(self, message: str = "Gradient tape already consumed by a backward pass"):
        super().__init__(message, error_code="TAPE_CONSUMED")


class TokenLookupError(TensorError):
    """Индекс вне таблицы эмбеддингов"""
    def __init__(self, table: str, index: int, size: int):
        super().__init__(
            f"Id {index} out of range for {table} of size {size}",
            error_code="LOOKUP_OUT_OF_RANGE",
            details={"table": table, "index": int(index), "size": int(size)}
        )


# ============ Data Errors ============

class DataError(HierBertError):
    """Базовая ошибка корпуса и построения примеров"""
    def __init__(self, message: str, error_code: str = "DATA_ERROR", **kwargs):
        super().__init__(message, exit_code=3, error_code=error_code, **kwargs)


class InputError(DataError):
    """Корпус или набор записей не подходит для запроса"""
    def __init__(self, message: str, counts: Dict[str, int] = None):
        super().__init__(message, error_code="INVALID_INPUT", details={"counts": counts or {}})


class SpanNotFoundError(DataError):
    """Ответ потерян при токенизации контекста"""
    def __init__(self, answer: str):
        super().__init__(
            f"Answer span {answer!r} not found in tokenised context",
            error_code="SPAN_NOT_FOUND",
            details={"answer": answer}
        )


# ============ Numeric Errors ============

class NumericError(HierBertError):
    """NaN или inf в функции потерь или в оптимизаторе"""
    def __init__(self, message: str, parameter: str = None):
        super().__init__(
            message,
            exit_code=4,
            error_code="NUMERIC_FAILURE",
            details={"parameter": parameter} if parameter else {}
        )


# ============ Checkpoint Errors ============

class CheckpointError(HierBertError):
    """Базовая ошибка сохранения чекпоинтов"""
    def __init__(self, message: str, error_code: str = "CHECKPOINT_ERROR", **kwargs):
        super().__init__(message, exit_code=2, error_code=error_code, **kwargs)


class MissingCheckpointError(CheckpointError):
    """Нет каталога чекпоинта или manifest.json"""
    def __init__(self, path: str):
        super().__init__(
            f"No checkpoint found at {path}",
            error_code="CHECKPOINT_MISSING",
            details={"path": str(path)}
        )


class FormatVersionError(CheckpointError):
    """Manifest записан несовместимой версией формата"""
    def __init__(self, found: Any, expected: int):
        super().__init__(
            f"Checkpoint format version {found!r} is not supported (expected {expected})",
            error_code="FORMAT_VERSION",
            details={"found": found, "expected": expected}
        )


class ChecksumMismatchError(CheckpointError):
    """Массив в payload.bin не совпадает с контрольной суммой"""
    def __init__(self, array: str):
        super().__init__(
            f"Checksum mismatch for array '{array}'",
            error_code="CHECKSUM_MISMATCH",
            details={"array": array}
        )


class EncoderChecksumError(HierBertError):
    """Обучение классификатора изменило параметры энкодера"""
    def __init__(self, before: str, after: str):
        super().__init__(
            "Encoder parameters changed during probe training",
            exit_code=4,
            error_code="ENCODER_MODIFIED",
            details={"before": before, "after": after}
        )
