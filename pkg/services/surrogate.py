"""
Чёрный ящик, угадывание его семейства и обучение суррогатной модели
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config import FAMILIES, SPECULATION_CONFIG, SURROGATE_CONFIG, TRAIN_CONFIG, WORKLOAD_POLICY_CONFIG
from services.datastore import Database, Schema, true_cardinality
from services.estimators import (
    CEModel,
    LabelNormalizer,
    QErrorReport,
    build_model,
    evaluate_estimates,
    estimate_cardinalities,
    fit,
    predict,
    qerror_loss,
    train,
)
from services.querylang import Query, Workload, encode_workload, generate_workload, random_query
from utils.calculations import calculate_qerror, cosine_similarity, denormalize_output
from utils.error_handler import ConfigurationError, DimensionMismatchError, ModelError, SpeculationError

logger = logging.getLogger(__name__)

SURROGATE_MODES = ('direct', 'dual')
MIN_PROBE_SIZE = 10
# Попыток на один запрос страты, прежде чем страта признаётся невыполнимой
STRATUM_ATTEMPTS = 200


class BlackBoxOracle:
    """
    Непрозрачный доступ к модели жертвы

    Доступны только две функции: оценка по кодированию (оценка, задержка)
    и точная кардинальность запроса (канал COUNT(*)).
    """

    __slots__ = ('predict_fn', 'label_fn')

    def __init__(self, predict_fn: Callable[[np.ndarray], Tuple[float, float]],
                 label_fn: Callable[[Query], int]):
        self.predict_fn = predict_fn
        self.label_fn = label_fn

    @classmethod
    def from_model(cls, model: CEModel, db: Database) -> 'BlackBoxOracle':
        """Обёртка над моделью и базой; сама модель наружу не видна"""
        normalizer = model.require_normalizer()
        n_tables = db.schema.n

        def predict_fn(x: np.ndarray) -> Tuple[float, float]:
            value, latency = predict(model, x)
            # Максимум нормализации зависит от шаблона соединения в кодировании
            tables = np.flatnonzero(np.asarray(x)[:n_tables] > 0.5)
            return denormalize_output(value, normalizer.pattern_max(tables)), latency

        def label_fn(query: Query) -> int:
            return true_cardinality(db, query)

        return cls(predict_fn, label_fn)


def oracle_estimates(oracle: BlackBoxOracle, X: np.ndarray) -> np.ndarray:
    """Оценки чёрного ящика для каждой строки матрицы кодирований"""
    return np.array([oracle.predict_fn(row)[0] for row in np.atleast_2d(X)], dtype=np.float64)


@dataclass
class SpeculationProfile:
    """Векторы производительности кандидатов и чёрного ящика на пробной нагрузке"""
    candidate_families: List[str]
    probe: Workload
    vectors: Dict[str, np.ndarray]
    black_box_vector: np.ndarray
    cosines: Dict[str, float]
    chosen: str
    tie: bool = False
    strata: List[Tuple[int, str]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'candidates': list(self.candidate_families),
            'cosines': dict(self.cosines),
            'chosen': self.chosen,
            'tie': self.tie,
            'probe': {
                'size': len(self.probe),
                'strata': [f"{c}:{w}" for c, w in self.strata],
            },
        }


WIDTH_CLASSES = ('narrow', 'medium', 'wide')


def _width_range(width_class: str, narrow: float, wide: float) -> Tuple[float, float]:
    if width_class == 'narrow':
        return WORKLOAD_POLICY_CONFIG['width_min'], narrow
    if width_class == 'medium':
        return narrow, wide
    return wide, 1.0


def build_probe_queries(
    db: Database,
    n_t: int,
    seed: int,
    narrow_width: float = SPECULATION_CONFIG['narrow_width'],
    wide_width: float = SPECULATION_CONFIG['wide_width'],
) -> Workload:
    """
    Стратифицированная пробная нагрузка: число столбцов x ширина диапазона

    Args:
        db: База данных (источник меток)
        n_t: Желаемое число пробных запросов (>= 10)
        seed: Зерно
        narrow_width: Верхняя граница узких диапазонов
        wide_width: Нижняя граница широких диапазонов

    Returns:
        Workload с provenance='probe'; по ceil(n_t / strata) запросов на страту
    """
    if n_t < MIN_PROBE_SIZE:
        raise SpeculationError(f"Пробная нагрузка слишком мала: {n_t} < {MIN_PROBE_SIZE}")
    schema = db.schema
    rng = np.random.default_rng(seed)
    patterns = schema.join_patterns
    # Сколько атрибутов доступно в каждом шаблоне соединения
    attrs_per_pattern = [int(np.sum(np.isin(schema.attribute_tables, list(p)))) for p in patterns]
    max_columns = max(attrs_per_pattern)
    if max_columns == 1:
        logger.warning("В схеме один атрибут: страты по числу столбцов схлопываются в одну")

    strata = [(c, w) for c in range(1, max_columns + 1) for w in WIDTH_CLASSES]
    per_stratum = math.ceil(n_t / len(strata))
    queries: List[Query] = []
    labels: List[int] = []
    kept_strata = []
    for columns, width_class in strata:
        # Шаблоны, где хватает атрибутов на columns предикатов
        eligible = [p for p, k in zip(patterns, attrs_per_pattern) if k >= columns]
        low, high = _width_range(width_class, narrow_width, wide_width)
        emitted = 0
        attempts = 0
        while emitted < per_stratum and attempts < STRATUM_ATTEMPTS * per_stratum:
            attempts += 1
            tables = eligible[rng.integers(len(eligible))]
            query = random_query(rng, schema, tables, columns, low, high)
            # random_query мог взять меньше столбцов, чем просили
            if len(query.predicates) != columns:
                continue
            y = true_cardinality(db, query)
            if y > 0:
                queries.append(query)
                labels.append(y)
                emitted += 1
        if emitted < per_stratum:
            logger.warning(f"Страта ({columns} столбцов, {width_class}) невыполнима: "
                           f"получено {emitted}/{per_stratum}, страта схлопнута")
        if emitted:
            kept_strata.append((columns, width_class))

    if len(queries) < MIN_PROBE_SIZE:
        raise SpeculationError(f"Удалось построить только {len(queries)} пробных запросов")
    workload = Workload(queries=queries, labels=labels, provenance='probe')
    workload.meta["strata"] = kept_strata
    return workload


def _min_latency(measure: Callable[[], float], repeats: int) -> float:
    return min(measure() for _ in range(repeats))


def _scale_columns(matrix: np.ndarray) -> np.ndarray:
    """Min-max по каждому измерению среди всех моделей; постоянные измерения -> 0"""
    low = matrix.min(axis=0, keepdims=True)
    span = matrix.max(axis=0, keepdims=True) - low
    return np.where(span > 0, (matrix - low) / np.where(span > 0, span, 1.0), 0.0)


def _interleave(qerrors: np.ndarray, latencies: np.ndarray) -> np.ndarray:
    out = np.empty(qerrors.shape[:-1] + (2 * qerrors.shape[-1],), dtype=np.float64)
    out[..., 0::2] = qerrors
    out[..., 1::2] = latencies
    return out


def performance_vectors(
    qerrors: np.ndarray,
    latencies: np.ndarray,
) -> np.ndarray:
    """
    Масштабированные векторы производительности (k + 1) x 2n_t

    Args:
        qerrors: Q-error по пробным запросам, строка на модель
        latencies: Задержки по тем же запросам

    Returns:
        Чередование log Q-error и задержек после min-max по измерениям
    """
    return _interleave(_scale_columns(np.log(qerrors)), _scale_columns(latencies))


def choose_family(families: Sequence[str], vectors: np.ndarray, black_box: np.ndarray) -> Tuple[str, Dict[str, float], bool]:
    """Семейство с максимальным косинусным сходством; ничья - по наименьшему индексу семейства"""
    cosines = {family: cosine_similarity(vec, black_box) for family, vec in zip(families, vectors)}
    best = max(cosines.values())
    winners = [f for f in families if abs(cosines[f] - best) <= 1e-12]
    winners.sort(key=FAMILIES.index)
    tie = len(winners) > 1
    if tie:
        logger.warning(f"Ничья при угадывании семейства между {winners}: выбрано {winners[0]}")
    return winners[0], cosines, tie


def build_speculation_profile(
    oracle: BlackBoxOracle,
    db: Database,
    candidates: Optional[Sequence[str]] = None,
    probe: Optional[Workload] = None,
    seed: int = 0,
    train_size: int = SPECULATION_CONFIG['candidate_train_size'],
    epochs: int = SPECULATION_CONFIG['candidate_epochs'],
    latency_repeats: int = SPECULATION_CONFIG['latency_repeats'],
) -> SpeculationProfile:
    """
    Обучение кандидатов и сравнение их поведения с чёрным ящиком

    Args:
        oracle: Чёрный ящик
        db: База данных атакующего (для меток своих нагрузок)
        candidates: Семейства-кандидаты (по умолчанию все)
        probe: Пробная нагрузка (по умолчанию строится стратифицированно)
        seed: Зерно
        train_size: Размер случайной обучающей нагрузки кандидатов
        epochs: Эпохи обучения кандидатов
        latency_repeats: Повторы замера задержки (берётся минимум)

    Returns:
        SpeculationProfile с выбранным семейством
    """
    candidates = list(candidates or SPECULATION_CONFIG['candidates'])
    unknown = [c for c in candidates if c not in FAMILIES]
    if not candidates or unknown:
        raise ConfigurationError(f"Недопустимый список кандидатов: {candidates}")
    # Порядок кандидатов фиксирован порядком FAMILIES
    candidates.sort(key=FAMILIES.index)
    schema = db.schema
    if probe is None:
        probe = build_probe_queries(db, SPECULATION_CONFIG['probe_size'], seed)
    if len(probe) < MIN_PROBE_SIZE:
        raise SpeculationError(f"Пробная нагрузка слишком мала: {len(probe)} < {MIN_PROBE_SIZE}")

    X = encode_workload(probe, schema)
    truth = probe.label_array()
    normalizer = LabelNormalizer.from_label_fn(schema, oracle.label_fn)
    candidate_workload = generate_workload(db, train_size, seed=seed, provenance='train')

    qerrors, latencies = [], []
    # Обучаем кандидатов на своей нагрузке и замеряем их на пробе
    for family in candidates:
        model = build_model(family, schema, seed=seed, normalizer=normalizer)
        model = train(model, candidate_workload, epochs=epochs, seed=seed, patience=None)
        estimates = estimate_cardinalities(model, X)
        qerrors.append([calculate_qerror(e, t) for e, t in zip(estimates, truth)])
        latencies.append([_min_latency(lambda row=row: predict(model, row)[1], latency_repeats) for row in X])
        logger.debug(f"Кандидат {family}: средний Q-error на пробе {np.mean(qerrors[-1]):.3f}")

    # Чёрный ящик: первая оценка и минимальная задержка из повторов
    bb_estimates = []
    bb_latencies = []
    for row in X:
        timings = [oracle.predict_fn(row) for _ in range(latency_repeats)]
        bb_estimates.append(timings[0][0])
        bb_latencies.append(min(t[1] for t in timings))
    qerrors.append([calculate_qerror(e, t) for e, t in zip(bb_estimates, truth)])
    latencies.append(bb_latencies)

    # Последняя строка - вектор чёрного ящика
    vectors = performance_vectors(np.asarray(qerrors), np.asarray(latencies))
    chosen, cosines, tie = choose_family(candidates, vectors[:-1], vectors[-1])
    logger.info(f"Угаданное семейство чёрного ящика: {chosen} (cos={cosines[chosen]:.4f})")
    return SpeculationProfile(
        candidate_families=candidates,
        probe=probe,
        vectors={f: v for f, v in zip(candidates, vectors[:-1])},
        black_box_vector=vectors[-1],
        cosines=cosines,
        chosen=chosen,
        tie=tie,
        strata=list(probe.meta.get("strata", [])),
    )


def speculate_type(
    oracle: BlackBoxOracle,
    db: Database,
    candidates: Optional[Sequence[str]] = None,
    probe: Optional[Workload] = None,
    seed: int = 0,
    **kwargs: Any,
) -> str:
    """Угаданное семейство чёрного ящика"""
    return build_speculation_profile(oracle, db, candidates, probe, seed, **kwargs).chosen


def train_surrogate(
    family: str,
    oracle: BlackBoxOracle,
    train_workload: Workload,
    schema: Schema,
    mode: str = SURROGATE_CONFIG['mode'],
    lr: float = SURROGATE_CONFIG['lr'],
    epochs: int = SURROGATE_CONFIG['epochs'],
    seed: int = 0,
    batch_size: int = SURROGATE_CONFIG['batch_size'],
    hyperparams: Optional[Dict[str, Any]] = None,
) -> CEModel:
    """
    Обучение суррогата подражанием чёрному ящику (direct) или подражанием плюс истинные метки (dual)

    Args:
        family: Семейство суррогата
        oracle: Чёрный ящик
        train_workload: Нагрузка атакующего
        schema: Схема базы
        mode: 'direct' или 'dual'
        lr: Скорость обучения
        epochs: Число эпох
        seed: Зерно
        batch_size: Размер мини-батча
        hyperparams: Перекрытия гиперпараметров

    Returns:
        Обученная суррогатная модель
    """
    if mode not in SURROGATE_MODES:
        raise ConfigurationError(f"Неизвестный режим суррогата: {mode}")
    if len(train_workload) == 0:
        raise ModelError("Пустая нагрузка для суррогата")
    if mode == 'dual' and not train_workload.is_labeled:
        raise ModelError("Режим dual требует истинных меток")

    normalizer = LabelNormalizer.from_label_fn(schema, oracle.label_fn)
    surrogate = build_model(family, schema, hyperparams, seed=seed, normalizer=normalizer)
    X = encode_workload(train_workload, schema)
    if X.shape[1] != surrogate.input_dim:
        raise DimensionMismatchError(f"Кодирование длины {X.shape[1]} не подходит модели {family}")

    # Обе цели денормализуются одинаково через log_max шаблона
    log_max = surrogate.log_max(X)
    imitation = torch.from_numpy(oracle_estimates(oracle, X))
    truth = torch.from_numpy(train_workload.label_array()) if mode == 'dual' else None

    def batch_loss(values: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
        loss = qerror_loss(values, log_max[index], imitation[index])
        if truth is not None:
            loss = loss + qerror_loss(values, log_max[index], truth[index])
        return loss.mean()

    trained = fit(surrogate, X, batch_loss, lr, epochs, batch_size, seed,
                  patience=TRAIN_CONFIG['patience'], desc=f'surrogate-{mode}')
    logger.info(f"Суррогат {family} ({mode}) обучен: потеря {trained.training_curve[0]:.3f} -> "
                f"{trained.training_curve[-1]:.3f}")
    return trained


def imitation_qerrors(surrogate: CEModel, oracle: BlackBoxOracle, X: np.ndarray) -> np.ndarray:
    """Q-error между оценками суррогата и чёрного ящика для каждой строки"""
    ours = estimate_cardinalities(surrogate, X)
    theirs = oracle_estimates(oracle, X)
    return np.array([calculate_qerror(a, b) for a, b in zip(ours, theirs)])


def imitation_error(surrogate: CEModel, oracle: BlackBoxOracle, workload: Workload) -> QErrorReport:
    """Точность подражания суррогата чёрному ящику на отложенной нагрузке"""
    X = encode_workload(workload, surrogate.schema)
    return evaluate_estimates(estimate_cardinalities(surrogate, X), oracle_estimates(oracle, X))
