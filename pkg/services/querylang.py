"""
Запросы, их векторное кодирование, генерация нагрузки и дивергенция распределений
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import WORKLOAD_POLICY_CONFIG
from services.datastore import Database, Schema, true_cardinality
from utils.calculations import js_divergence_from_histograms
from utils.error_handler import (
    ConfigurationError,
    DimensionMismatchError,
    InvalidEncodingError,
    InvalidQueryError,
    WorkloadGenerationError,
)

logger = logging.getLogger(__name__)

PROVENANCES = ('historical', 'train', 'test', 'probe', 'poison')
# Для этих нагрузок нулевые метки недопустимы
LABELED_PROVENANCES = ('historical', 'train', 'probe')

NO_PREDICATE = (0.0, 1.0)

Bounds = Tuple[float, float]


@dataclass(frozen=True)
class Query:
    """
    SPJ-запрос: множество соединяемых таблиц и диапазонные предикаты

    predicates хранит только настоящие предикаты; (0, 1) означает
    отсутствие предиката и в словарь не попадает.
    """
    tables: FrozenSet[int]
    predicates: Dict[str, Bounds] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'tables', frozenset(int(t) for t in self.tables))
        canonical = {}
        for name, (lb, ub) in sorted(self.predicates.items()):
            lb, ub = float(lb), float(ub)
            if not 0.0 <= lb <= ub <= 1.0:
                raise InvalidQueryError(f"Предикат {name}: требуется 0 <= lb <= ub <= 1, получено ({lb}, {ub})")
            if (lb, ub) != NO_PREDICATE:
                canonical[name] = (lb, ub)
        object.__setattr__(self, 'predicates', canonical)


@dataclass(frozen=True, eq=False)
class QueryEncoding:
    """Вектор x = x_join ⊕ x_sel длины n + 2m"""
    x_join: np.ndarray
    x_sel: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.x_join, self.x_sel])

    @classmethod
    def from_vector(cls, x: Sequence[float], schema: Schema) -> 'QueryEncoding':
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (schema.n + 2 * schema.m,):
            raise DimensionMismatchError(f"Ожидалась длина {schema.n + 2 * schema.m}, получено {x.shape}")
        return cls(x_join=x[:schema.n].copy(), x_sel=x[schema.n:].copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QueryEncoding):
            return NotImplemented
        return np.array_equal(self.x_join, other.x_join) and np.array_equal(self.x_sel, other.x_sel)


@dataclass
class Workload:
    """Набор запросов с выровненными метками и происхождением"""
    queries: List[Query]
    labels: Optional[List[int]] = None
    provenance: str = 'train'
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ConfigurationError(f"Неизвестное происхождение нагрузки: {self.provenance}")
        if self.labels is not None:
            self.labels = [int(y) for y in self.labels]
            if len(self.labels) != len(self.queries):
                raise InvalidQueryError(
                    f"Число меток {len(self.labels)} не совпадает с числом запросов {len(self.queries)}")
            if self.provenance in LABELED_PROVENANCES and any(y <= 0 for y in self.labels):
                raise InvalidQueryError(f"Нагрузка '{self.provenance}' содержит нулевые метки")

    def __len__(self) -> int:
        return len(self.queries)

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def label_array(self) -> np.ndarray:
        if self.labels is None:
            raise InvalidQueryError("Нагрузка не размечена")
        return np.asarray(self.labels, dtype=np.float64)

    def patterns(self) -> List[FrozenSet[int]]:
        return [q.tables for q in self.queries]

    def subset(self, indices: Iterable[int], provenance: Optional[str] = None) -> 'Workload':
        indices = list(indices)
        return Workload(
            queries=[self.queries[i] for i in indices],
            labels=None if self.labels is None else [self.labels[i] for i in indices],
            provenance=provenance or self.provenance,
        )

    def split(self, parts: int) -> List['Workload']:
        """Разбиение на parts почти равных последовательных частей"""
        if parts < 1 or parts > len(self):
            raise ConfigurationError(f"Нельзя разбить {len(self)} запросов на {parts} частей")
        return [self.subset(chunk.tolist()) for chunk in np.array_split(np.arange(len(self)), parts)]

    def without_empty(self) -> 'Workload':
        """Копия без запросов с нулевой кардинальностью"""
        if self.labels is None:
            return self
        return self.subset([i for i, y in enumerate(self.labels) if y > 0])


@dataclass(frozen=True)
class WorkloadPolicy:
    """Политика генерации нагрузки по шаблону: соединение, затем центр и ширина диапазонов"""
    pattern_weights: Optional[Tuple[float, ...]] = None
    predicates_min: int = WORKLOAD_POLICY_CONFIG['predicates_min']
    predicates_max: Optional[int] = WORKLOAD_POLICY_CONFIG['predicates_max']
    width_min: float = WORKLOAD_POLICY_CONFIG['width_min']
    width_max: float = WORKLOAD_POLICY_CONFIG['width_max']
    rejection_cap: float = WORKLOAD_POLICY_CONFIG['rejection_cap']

    def __post_init__(self):
        if not 0 < self.width_min <= self.width_max <= 1:
            raise ConfigurationError(f"Неверный диапазон ширины: [{self.width_min}, {self.width_max}]")
        if self.predicates_min < 0 or (self.predicates_max is not None and self.predicates_max < self.predicates_min):
            raise ConfigurationError("Неверный диапазон числа предикатов")
        if not 0 <= self.rejection_cap < 1:
            raise ConfigurationError(f"rejection_cap должен быть в [0, 1): {self.rejection_cap}")

    def weights_for(self, schema: Schema) -> np.ndarray:
        patterns = schema.join_patterns
        if self.pattern_weights is None:
            return np.full(len(patterns), 1.0 / len(patterns))
        weights = np.asarray(self.pattern_weights, dtype=float)
        if weights.shape != (len(patterns),) or np.any(weights < 0) or weights.sum() <= 0:
            raise ConfigurationError(f"pattern_weights должны задавать вес каждому из {len(patterns)} шаблонов")
        return weights / weights.sum()


def validate_query(query: Query, schema: Schema) -> None:
    """Проверка соответствия запроса схеме"""
    if not schema.is_connected(query.tables):
        raise InvalidQueryError(f"Множество таблиц пусто или несвязно: {sorted(query.tables)}")
    for name in query.predicates:
        if name not in schema.attribute_index:
            raise InvalidQueryError(f"Неизвестный атрибут {name}")
        if schema.attribute_tables[schema.attribute_index[name]] not in query.tables:
            raise InvalidQueryError(f"Предикат на атрибут {name} таблицы, не участвующей в соединении")


def encode(query: Query, schema: Schema) -> QueryEncoding:
    """
    Кодирование запроса в вектор фиксированной длины

    Args:
        query: Допустимый запрос
        schema: Схема базы

    Returns:
        QueryEncoding; атрибуты отсутствующих таблиц и атрибуты без предиката несут (0, 1)
    """
    validate_query(query, schema)
    x_join = np.zeros(schema.n, dtype=np.float64)
    x_join[sorted(query.tables)] = 1.0
    # По умолчанию каждый атрибут без предиката: (0, 1)
    x_sel = np.tile(np.array(NO_PREDICATE, dtype=np.float64), schema.m)
    for name, (lb, ub) in query.predicates.items():
        i = schema.attribute_index[name]
        x_sel[2 * i] = lb
        x_sel[2 * i + 1] = ub
    return QueryEncoding(x_join=x_join, x_sel=x_sel)


def decode(encoding: Union[QueryEncoding, Sequence[float]], schema: Schema) -> Query:
    """
    Восстановление запроса из вектора

    Args:
        encoding: QueryEncoding или плоский вектор x
        schema: Схема базы

    Returns:
        Query, для которого encode даёт тот же вектор
    """
    if not isinstance(encoding, QueryEncoding):
        encoding = QueryEncoding.from_vector(encoding, schema)
    x_join = np.asarray(encoding.x_join, dtype=np.float64)
    x_sel = np.asarray(encoding.x_sel, dtype=np.float64)
    if x_join.shape != (schema.n,) or x_sel.shape != (2 * schema.m,):
        raise DimensionMismatchError(
            f"Ожидались длины ({schema.n}, {2 * schema.m}), получено ({x_join.size}, {x_sel.size})")
    if not np.all((x_join == 0) | (x_join == 1)):
        raise InvalidEncodingError(f"x_join должен быть бинарным: {x_join.tolist()}")
    tables = frozenset(int(t) for t in np.flatnonzero(x_join))
    if not tables:
        raise InvalidEncodingError("Пустое множество таблиц в x_join")
    if not schema.is_connected(tables):
        raise InvalidEncodingError(f"Несвязное множество таблиц: {sorted(tables)}")

    # Чётные позиции - нижние границы, нечётные - верхние
    lbs, ubs = x_sel[0::2], x_sel[1::2]
    if np.any(lbs < 0) or np.any(ubs > 1) or np.any(lbs > ubs):
        raise InvalidEncodingError("Границы вне [0, 1] или lb > ub")
    predicates = {}
    for i, name in enumerate(schema.attribute_names):
        bounds = (float(lbs[i]), float(ubs[i]))
        if schema.attribute_tables[i] not in tables:
            if bounds != NO_PREDICATE:
                raise InvalidEncodingError(f"Атрибут {name} отсутствующей таблицы должен нести (0, 1)")
            continue
        if bounds != NO_PREDICATE:
            # Предикатом становятся только границы, отличные от (0, 1)
            predicates[name] = bounds
    return Query(tables=tables, predicates=predicates)


def is_valid_join(x_join: Sequence[float], schema: Schema) -> bool:
    """Непусто ли и связно ли множество таблиц, выбранных бинарным вектором"""
    x_join = np.asarray(x_join, dtype=np.float64)
    if x_join.shape != (schema.n,):
        return False
    return schema.is_connected(int(t) for t in np.flatnonzero(x_join > 0.5))


def encode_workload(workload: Union[Workload, Sequence[Query]], schema: Schema) -> np.ndarray:
    """Матрица кодирований N x (n + 2m)"""
    queries = workload.queries if isinstance(workload, Workload) else list(workload)
    if not queries:
        return np.zeros((0, schema.n + 2 * schema.m), dtype=np.float64)
    return np.stack([encode(q, schema).x for q in queries])


def sample_range(rng: np.random.Generator, width_min: float, width_max: float) -> Bounds:
    """Диапазон со случайным центром и лог-равномерной шириной"""
    # Ширина лог-равномерна: узкие диапазоны встречаются так же часто, как широкие
    width = math.exp(rng.uniform(math.log(width_min), math.log(width_max)))
    center = rng.uniform(0.0, 1.0)
    return max(0.0, center - width / 2), min(1.0, center + width / 2)


def random_query(
    rng: np.random.Generator,
    schema: Schema,
    tables: FrozenSet[int],
    n_predicates: int,
    width_min: float,
    width_max: float,
) -> Query:
    """Случайный запрос над заданным шаблоном соединения с n_predicates диапазонами"""
    candidates = [i for i, t in enumerate(schema.attribute_tables) if t in tables]
    n_predicates = min(n_predicates, len(candidates))
    chosen = sorted(rng.choice(candidates, size=n_predicates, replace=False).tolist()) if n_predicates else []
    predicates = {
        schema.attribute_names[i]: sample_range(rng, width_min, width_max)
        for i in chosen
    }
    return Query(tables=tables, predicates=predicates)


def generate_workload(
    db: Database,
    count: int,
    policy: Optional[WorkloadPolicy] = None,
    seed: int = 0,
    provenance: str = 'train',
) -> Workload:
    """
    Генерация размеченной нагрузки с отбраковкой пустых запросов

    Args:
        db: База данных (источник меток)
        count: Число запросов
        policy: Политика генерации
        seed: Зерно
        provenance: Метка происхождения нагрузки

    Returns:
        Workload ровно из count запросов с метками > 0
    """
    if count < 0:
        raise ConfigurationError(f"count должен быть неотрицательным: {count}")
    policy = policy or WorkloadPolicy()
    schema = db.schema
    rng = np.random.default_rng(seed)
    patterns = schema.join_patterns
    weights = policy.weights_for(schema)
    # Бюджет попыток, после которого доля пустых считается чрезмерной
    max_attempts = max(int(math.ceil(count / (1.0 - policy.rejection_cap))), count)

    queries: List[Query] = []
    labels: List[int] = []
    attempts = 0
    while len(queries) < count:
        if attempts >= max_attempts:
            rejected = attempts - len(queries)
            raise WorkloadGenerationError(
                f"Доля пустых запросов {rejected}/{attempts} превысила порог {policy.rejection_cap}; "
                f"сужайте ширины реже (width_min={policy.width_min}) или уменьшите число предикатов")
        attempts += 1
        tables = patterns[rng.choice(len(patterns), p=weights)]
        # Число предикатов ограничено атрибутами выбранного шаблона
        n_attrs = int(np.sum(np.isin(schema.attribute_tables, list(tables))))
        k_max = n_attrs if policy.predicates_max is None else min(policy.predicates_max, n_attrs)
        k_min = min(policy.predicates_min, k_max)
        k = int(rng.integers(k_min, k_max + 1))
        query = random_query(rng, schema, tables, k, policy.width_min, policy.width_max)
        y = true_cardinality(db, query)
        if y > 0:
            queries.append(query)
            labels.append(y)

    logger.debug(f"Нагрузка '{provenance}': {count} запросов за {attempts} попыток")
    return Workload(queries=queries, labels=labels, provenance=provenance)


def _as_matrix(encodings: Union[np.ndarray, Sequence[QueryEncoding]]) -> np.ndarray:
    if isinstance(encodings, np.ndarray):
        matrix = np.atleast_2d(encodings.astype(np.float64))
    else:
        items = list(encodings)
        if not items:
            matrix = np.zeros((0, 0))
        else:
            matrix = np.stack([e.x if isinstance(e, QueryEncoding) else np.asarray(e, dtype=np.float64)
                               for e in items])
    return matrix


def js_divergence(
    a: Union[np.ndarray, Sequence[QueryEncoding]],
    b: Union[np.ndarray, Sequence[QueryEncoding]],
    bins: int = 20,
) -> float:
    """
    Средняя по измерениям дивергенция Йенсена-Шеннона между наборами кодирований

    Args:
        a: Первый набор (матрица или список QueryEncoding)
        b: Второй набор той же размерности
        bins: Число равных корзин на [0, 1]

    Returns:
        Значение в [0, 1], симметричное по (a, b)
    """
    a = _as_matrix(a)
    b = _as_matrix(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidEncodingError("Для дивергенции нужны непустые наборы")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"Размерности кодирований различаются: {a.shape[1]} и {b.shape[1]}")
    values = []
    for d in range(a.shape[1]):
        # Гистограммы по общему разбиению [0, 1] для каждого измерения
        ha, _ = np.histogram(a[:, d], bins=bins, range=(0.0, 1.0))
        hb, _ = np.histogram(b[:, d], bins=bins, range=(0.0, 1.0))
        values.append(js_divergence_from_histograms(ha, hb))
    return float(np.mean(values))


def workload_policy_from_config(overrides: Optional[Mapping[str, object]] = None) -> WorkloadPolicy:
    """WorkloadPolicy из WORKLOAD_POLICY_CONFIG с перекрытиями"""
    params = dict(WORKLOAD_POLICY_CONFIG)
    params.update(overrides or {})
    unknown = set(params) - {'pattern_weights', 'predicates_min', 'predicates_max',
                             'width_min', 'width_max', 'rejection_cap'}
    if unknown:
        raise ConfigurationError(f"Неизвестные параметры политики нагрузки: {sorted(unknown)}")
    # WorkloadPolicy заморожена: веса хранятся кортежем
    if params.get('pattern_weights') is not None:
        params['pattern_weights'] = tuple(params['pattern_weights'])
    return WorkloadPolicy(**params)
