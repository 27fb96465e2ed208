"""
Функции для расчёта метрик оценки кардинальности
"""

import math
from typing import Dict, Sequence, Union

import numpy as np
from scipy.spatial.distance import jensenshannon

from utils.error_handler import DimensionMismatchError, MetricError

Number = Union[int, float]

PERCENTILES = (50, 90, 95, 99)


def calculate_qerror(estimate: Number, truth: Number) -> float:
    """
    Расчёт Q-error - отношение большего значения к меньшему

    Args:
        estimate: Оценка кардинальности (> 0)
        truth: Истинная кардинальность (> 0)

    Returns:
        max(estimate, truth) / min(estimate, truth), не меньше 1
    """
    if estimate <= 0 or truth <= 0:
        raise MetricError(f"Q-error определён только для положительных значений: {estimate}, {truth}")
    return max(estimate, truth) / min(estimate, truth)


def normalize_label(y: Number, pattern_max: Number) -> float:
    """
    Логарифмическая нормализация метки в (0, 1]

    Args:
        y: Кардинальность, 1 <= y <= pattern_max
        pattern_max: Кардинальность соединения без предикатов для шаблона

    Returns:
        ln(1 + y) / ln(1 + pattern_max)
    """
    if pattern_max < 1:
        raise MetricError(f"pattern_max должен быть >= 1, получен {pattern_max}")
    return math.log1p(y) / math.log1p(pattern_max)


def denormalize_output(value: float, pattern_max: Number) -> float:
    """
    Обратное преобразование к normalize_label с ограничением снизу единицей

    Args:
        value: Нормализованная оценка модели
        pattern_max: Кардинальность соединения без предикатов для шаблона

    Returns:
        Оценка кардинальности >= 1
    """
    if pattern_max < 1:
        raise MetricError(f"pattern_max должен быть >= 1, получен {pattern_max}")
    return max(math.expm1(value * math.log1p(pattern_max)), 1.0)


def nearest_rank_percentile(values: Sequence[float], percentile: float) -> float:
    """
    Процентиль по методу ближайшего ранга

    Args:
        values: Непустая выборка
        percentile: Процентиль в (0, 100]

    Returns:
        Значение ранга ceil(p/100 * N) в отсортированной выборке
    """
    ordered = np.sort(np.asarray(values, dtype=float))
    if ordered.size == 0:
        raise MetricError("Пустая выборка")
    # Ранг не меньше 1 при малых p
    rank = max(int(math.ceil(percentile / 100.0 * ordered.size)), 1)
    return float(ordered[rank - 1])


def summarize_qerrors(qerrors: Sequence[float]) -> Dict[str, float]:
    """
    Сводка Q-error: среднее, процентили и максимум

    Args:
        qerrors: Q-error по каждому запросу

    Returns:
        Словарь mean, p50, p90, p95, p99, max
    """
    values = np.asarray(qerrors, dtype=float)
    if values.size == 0:
        raise MetricError("Нет значений для сводки")
    summary = {'mean': float(values.mean())}
    for p in PERCENTILES:
        summary[f'p{p}'] = nearest_rank_percentile(values, p)
    summary['max'] = float(values.max())
    return summary


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Косинусное сходство векторов производительности

    Args:
        a: Первый вектор
        b: Второй вектор той же длины

    Returns:
        Косинус угла; 0 если один из векторов нулевой
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Разные размерности: {a.shape} и {b.shape}")
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))


def js_divergence_from_histograms(p: Sequence[float], q: Sequence[float]) -> float:
    """
    Дивергенция Йенсена-Шеннона (основание 2) между двумя гистограммами

    Args:
        p: Частоты первой гистограммы
        q: Частоты второй гистограммы

    Returns:
        Значение в [0, 1]
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    # Совпадающие распределения дают ровно 0
    if np.array_equal(p / p.sum(), q / q.sum()):
        return 0.0
    # jensenshannon возвращает расстояние, т.е. корень из дивергенции
    distance = jensenshannon(p, q, base=2)
    return float(np.clip(distance ** 2, 0.0, 1.0))


def ratio(poisoned: float, clean: float) -> float:
    """Во сколько раз выросла ошибка после отравления"""
    if clean <= 0:
        return 0.0
    return poisoned / clean
