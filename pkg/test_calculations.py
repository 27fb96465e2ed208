#!/usr/bin/env python3
"""
Тесты функций calculations.py: Q-error, нормализация меток, процентили,
косинусное сходство и дивергенция гистограмм
"""

import math
import os
import sys

import pytest

# Добавляем текущую директорию в path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import EXIT_CODES
from utils.calculations import (
    calculate_qerror,
    cosine_similarity,
    denormalize_output,
    js_divergence_from_histograms,
    nearest_rank_percentile,
    normalize_label,
    ratio,
    summarize_qerrors,
)
from utils.error_handler import DimensionMismatchError, MetricError, handle_exceptions


@pytest.mark.parametrize('estimate, truth, expected', [(5, 5, 1.0), (10, 2, 5.0), (2, 10, 5.0)])
def test_qerror(estimate, truth, expected):
    assert calculate_qerror(estimate, truth) == expected


def test_qerror_rejects_nonpositive():
    with pytest.raises(MetricError):
        calculate_qerror(0, 5)
    with pytest.raises(MetricError):
        calculate_qerror(5, -1)


def test_metric_errors_map_to_stage_failure_code():
    """Ошибка метрики проходит через обработчик как ошибка лаборатории, а не падение"""
    @handle_exceptions
    def command():
        calculate_qerror(0, 5)

    assert command() == EXIT_CODES['stage_failure']


def test_normalize_label_bounds():
    assert normalize_label(1000, 1000) == pytest.approx(1.0)
    assert 0.0 < normalize_label(1, 1000) < normalize_label(10, 1000) < 1.0
    with pytest.raises(MetricError):
        normalize_label(1, 0)


def test_denormalize_inverts_normalize():
    for y in (1, 7, 250, 1000):
        assert denormalize_output(normalize_label(y, 1000), 1000) == pytest.approx(y)
    # нулевая оценка ограничивается снизу единицей
    assert denormalize_output(0.0, 1000) == 1.0
    with pytest.raises(MetricError):
        denormalize_output(0.5, 0)


def test_nearest_rank_percentile():
    values = list(range(1, 101))
    assert nearest_rank_percentile(values, 50) == 50
    assert nearest_rank_percentile(values, 99) == 99
    assert nearest_rank_percentile([3.0], 90) == 3.0
    assert nearest_rank_percentile([4.0, 1.0, 2.0, 3.0], 50) == 2.0
    with pytest.raises(MetricError):
        nearest_rank_percentile([], 50)


def test_summarize_qerrors():
    summary = summarize_qerrors([1.0, 2.0, 3.0, 10.0])
    assert list(summary) == ['mean', 'p50', 'p90', 'p95', 'p99', 'max']
    assert summary['mean'] == 4.0
    assert summary['p50'] == 2.0
    assert summary['max'] == summary['p99'] == 10.0
    with pytest.raises(MetricError):
        summarize_qerrors([])
    print('✅ Сводка Q-error корректна')


def test_cosine_similarity():
    assert cosine_similarity([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)
    assert cosine_similarity([1, 0], [-1, 0]) == pytest.approx(-1.0)
    assert cosine_similarity([0, 0], [1, 1]) == 0.0
    a, b = [0.3, 0.1, 0.9], [0.5, 0.7, 0.2]
    assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a))
    with pytest.raises(DimensionMismatchError):
        cosine_similarity([1, 2], [1, 2, 3])


def test_js_divergence_from_histograms():
    assert js_divergence_from_histograms([1, 2, 3], [2, 4, 6]) == 0.0
    assert js_divergence_from_histograms([1, 0], [0, 1]) == pytest.approx(1.0)
    value = js_divergence_from_histograms([5, 3, 2], [2, 3, 5])
    assert 0.0 < value < 1.0
    assert value == pytest.approx(js_divergence_from_histograms([2, 3, 5], [5, 3, 2]))


def test_ratio():
    assert ratio(6.0, 2.0) == 3.0
    assert ratio(5.0, 0.0) == 0.0
    assert math.isfinite(ratio(1e9, 1e-9))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
