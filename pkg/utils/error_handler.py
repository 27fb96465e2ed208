"""
Система обработки ошибок и логирования
"""

import functools
import logging
import time
from contextlib import contextmanager
from datetime import datetime
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

from config import EXIT_CODES

logger = logging.getLogger(__name__)


class LabError(Exception):
    """Базовая ошибка лаборатории"""


class ConfigurationError(LabError):
    """Некорректная конфигурация, схема или параметры распределений"""


class InvalidQueryError(LabError):
    """Запрос не соответствует схеме (пустое или несвязное соединение и т.п.)"""


class InvalidEncodingError(LabError):
    """Векторное представление запроса нарушает инварианты"""


class DimensionMismatchError(LabError):
    """Размерность входа не совпадает с ожидаемой"""


class WorkloadGenerationError(LabError):
    """Не удалось набрать нагрузку с ненулевой кардинальностью"""


class ModelError(LabError):
    """Ошибка построения, обучения или обновления модели"""


class MetricError(LabError):
    """Недопустимый вход метрики (неположительная кардинальность, пустая выборка)"""


class AttackOrderingError(LabError):
    """Методы атаки нарушили ожидаемый порядок силы"""

    def __init__(self, message: str, violations: Optional[List[Tuple[str, str]]] = None):
        super().__init__(message)
        self.violations = violations or []


class SpeculationError(LabError):
    """Ошибка угадывания типа чёрного ящика"""


class GeneratorSamplingError(LabError):
    """Генератор не выдал допустимый шаблон соединения за отведённые попытки"""

    def __init__(self, message: str, soft_join: Optional[List[float]] = None):
        super().__init__(message)
        self.soft_join = soft_join


class GeneratorDivergenceError(LabError):
    """Целевая функция генератора стала неконечной"""

    def __init__(self, message: str, trace: Optional[List[float]] = None):
        super().__init__(message)
        self.trace = trace or []


class StageError(LabError):
    """Сбой этапа эксперимента с указанием этапа"""

    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"Этап '{stage}' завершился ошибкой: {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error


class ErrorHandler:
    """Централизованная система учёта ошибок"""

    def __init__(self):
        self.error_counts: Dict[str, int] = {}
        self.last_errors: List[Dict[str, Any]] = []
        self.max_last_errors = 50

    def handle_error(self, error: BaseException, command: Optional[str] = None) -> int:
        """
        Регистрирует ошибку и возвращает код выхода CLI

        Args:
            error: Пойманное исключение
            command: Имя команды, в которой случилась ошибка

        Returns:
            Код выхода (2 для ошибок конфигурации, 3 для остальных)
        """
        error_type = type(error).__name__
        self.error_counts[error_type] = self.error_counts.get(error_type, 0) + 1

        error_info = {
            'timestamp': datetime.now().isoformat(),
            'type': error_type,
            'message': str(error),
            'command': command,
            'stage': getattr(error, 'stage', None),
        }
        self.last_errors.append(error_info)
        if len(self.last_errors) > self.max_last_errors:
            self.last_errors.pop(0)

        logger.error(f"Error '{error_type}' в команде {command or 'unknown'}: {error}")

        root = error.error if isinstance(error, StageError) else error
        if isinstance(root, ConfigurationError):
            return EXIT_CODES['config_error']
        return EXIT_CODES['stage_failure']

    def get_error_stats(self) -> Dict[str, Any]:
        """Получение статистики ошибок"""
        return {
            'error_counts': self.error_counts,
            'total_errors': sum(self.error_counts.values()),
            'last_errors': self.last_errors[-10:],
        }

    def clear_error_stats(self) -> None:
        """Очистка статистики ошибок"""
        self.error_counts.clear()
        self.last_errors.clear()


# Глобальный экземпляр обработчика ошибок
_error_handler = None


def get_error_handler() -> ErrorHandler:
    """Получение экземпляра обработчика ошибок"""
    global _error_handler
    if _error_handler is None:
        _error_handler = ErrorHandler()
    return _error_handler


def handle_exceptions(func: Callable[..., Any]) -> Callable[..., int]:
    """
    Декоратор для обработчиков CLI: переводит исключения в коды выхода

    Args:
        func: Обработчик команды

    Returns:
        Обёрнутая функция, возвращающая код выхода
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            func(*args, **kwargs)
            return EXIT_CODES['success']
        except LabError as e:
            return get_error_handler().handle_error(e, command=func.__name__)
    return wrapper


class RunMetrics:
    """Учёт этапов эксперимента: длительности и счётчики успехов/сбоев"""

    def __init__(self):
        self.spans: Dict[str, float] = {}
        self.metrics = {
            'total_stages': 0,
            'successful_stages': 0,
            'failed_stages': 0,
            'started_at': time.perf_counter(),
        }

    def record_stage(self, name: str, seconds: float, success: bool = True) -> None:
        """Записать этап в метрики (повторные этапы суммируются)"""
        self.spans[name] = self.spans.get(name, 0.0) + seconds
        self.metrics['total_stages'] += 1
        if success:
            self.metrics['successful_stages'] += 1
        else:
            self.metrics['failed_stages'] += 1

    def wall_time(self) -> float:
        """Время с момента создания метрик"""
        return time.perf_counter() - self.metrics['started_at']

    def get_metrics(self) -> Dict[str, Any]:
        """Получить все метрики"""
        return {
            'spans': dict(self.spans),
            'total_stages': self.metrics['total_stages'],
            'successful_stages': self.metrics['successful_stages'],
            'failed_stages': self.metrics['failed_stages'],
            'wall_time': self.wall_time(),
        }


@contextmanager
def stage(name: str, metrics: Optional[RunMetrics] = None) -> Iterator[None]:
    """
    Контекст этапа эксперимента: логирование, замер времени и тегирование ошибок

    Args:
        name: Имя этапа
        metrics: Куда записать длительность этапа
    """
    logger.info(f"Этап '{name}' начат")
    started = time.perf_counter()
    try:
        yield
    except StageError:
        if metrics is not None:
            metrics.record_stage(name, time.perf_counter() - started, success=False)
        raise
    except Exception as e:
        if metrics is not None:
            metrics.record_stage(name, time.perf_counter() - started, success=False)
        logger.error(f"Этап '{name}' завершился ошибкой: {e}")
        raise StageError(name, e) from e
    elapsed = time.perf_counter() - started
    if metrics is not None:
        metrics.record_stage(name, elapsed)
    logger.info(f"Этап '{name}' завершён за {elapsed:.2f}s")
