"""
Синтетические реляционные базы данных и точный подсчёт кардинальности
"""

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd

from config import SCHEMA_PRESETS
from utils.error_handler import ConfigurationError, InvalidQueryError

logger = logging.getLogger(__name__)

DISTRIBUTIONS = ('uniform', 'zipf', 'gaussian')


@dataclass(frozen=True)
class AttributeSpec:
    """Числовой атрибут таблицы с доменом и законом распределения"""
    name: str
    domain: Tuple[float, float]
    distribution: Dict[str, Any] = field(default_factory=lambda: {'kind': 'uniform'})
    integer: bool = False

    @property
    def dom_lo(self) -> float:
        return float(self.domain[0])

    @property
    def dom_hi(self) -> float:
        return float(self.domain[1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'domain': [self.domain[0], self.domain[1]],
            'integer': self.integer,
            'distribution': dict(self.distribution),
        }


@dataclass(frozen=True)
class TableSpec:
    """Описание таблицы: имя, число строк, атрибуты и ключи соединений"""
    name: str
    row_count: int
    attributes: Tuple[AttributeSpec, ...]
    key_attributes: Tuple[str, ...] = ()

    @property
    def data_attributes(self) -> List[AttributeSpec]:
        """Атрибуты, не являющиеся ключами (именно они попадают в кодирование)"""
        return [a for a in self.attributes if a.name not in self.key_attributes]

    def attribute(self, name: str) -> AttributeSpec:
        for attr in self.attributes:
            if attr.name == name:
                return attr
        raise ConfigurationError(f"В таблице {self.name} нет атрибута {name}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'row_count': self.row_count,
            'attributes': [a.to_dict() for a in self.attributes],
            'key_attributes': list(self.key_attributes),
        }


@dataclass(frozen=True)
class JoinEdge:
    """Ребро эквисоединения между ключевыми атрибутами двух таблиц"""
    left_table: int
    left_key: str
    right_table: int
    right_key: str

    def keys_from(self, table: int) -> Tuple[str, str]:
        """Пара (ключ таблицы table, ключ соседней таблицы)"""
        if table == self.left_table:
            return self.left_key, self.right_key
        return self.right_key, self.left_key


@dataclass(frozen=True)
class Schema:
    """Схема базы: таблицы и граф эквисоединений"""
    tables: Tuple[TableSpec, ...]
    join_edges: Tuple[JoinEdge, ...] = ()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Schema':
        """Построение схемы из словаря (формат файла схемы) с валидацией"""
        try:
            tables = tuple(
                TableSpec(
                    name=t['name'],
                    row_count=int(t['row_count']),
                    attributes=tuple(
                        AttributeSpec(
                            name=a['name'],
                            domain=(float(a['domain'][0]), float(a['domain'][1])),
                            distribution=dict(a.get('distribution', {'kind': 'uniform'})),
                            integer=bool(a.get('integer', False)),
                        )
                        for a in t['attributes']
                    ),
                    key_attributes=tuple(t.get('key_attributes', [])),
                )
                for t in data['tables']
            )
            edges = tuple(JoinEdge(int(e[0]), e[1], int(e[2]), e[3]) for e in data.get('join_edges', []))
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Некорректное описание схемы: {e}") from e
        schema = cls(tables=tables, join_edges=edges)
        schema.validate()
        return schema

    def to_dict(self) -> Dict[str, Any]:
        return {
            'tables': [t.to_dict() for t in self.tables],
            'join_edges': [[e.left_table, e.left_key, e.right_table, e.right_key] for e in self.join_edges],
        }

    @property
    def n(self) -> int:
        return len(self.tables)

    @property
    def m(self) -> int:
        return len(self.attributes)

    @cached_property
    def attributes(self) -> List[Tuple[int, AttributeSpec]]:
        """Некключевые атрибуты в порядке схемы: (индекс таблицы, атрибут)"""
        return [(ti, attr) for ti, table in enumerate(self.tables) for attr in table.data_attributes]

    @cached_property
    def attribute_names(self) -> List[str]:
        """Полные имена атрибутов вида table.attr"""
        return [f"{self.tables[ti].name}.{attr.name}" for ti, attr in self.attributes]

    @cached_property
    def attribute_index(self) -> Dict[str, int]:
        return {name: i for i, name in enumerate(self.attribute_names)}

    @cached_property
    def attribute_tables(self) -> np.ndarray:
        """Индекс таблицы для каждого атрибута кодирования"""
        return np.array([ti for ti, _ in self.attributes], dtype=np.int64)

    @cached_property
    def table_index(self) -> Dict[str, int]:
        return {t.name: i for i, t in enumerate(self.tables)}

    @cached_property
    def graph(self) -> nx.Graph:
        """Граф соединений: вершины - индексы таблиц"""
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        for edge in self.join_edges:
            g.add_edge(edge.left_table, edge.right_table, edge=edge)
        return g

    @cached_property
    def join_patterns(self) -> List[FrozenSet[int]]:
        """Все связные подмножества таблиц (допустимые шаблоны соединения)"""
        patterns = []
        for size in range(1, self.n + 1):
            for combo in itertools.combinations(range(self.n), size):
                if self.is_connected(combo):
                    patterns.append(frozenset(combo))
        return patterns

    def is_connected(self, tables: Iterable[int]) -> bool:
        """Непустое ли множество таблиц и связен ли порождённый подграф"""
        tables = set(tables)
        if not tables or not tables.issubset(range(self.n)):
            return False
        return nx.is_connected(self.graph.subgraph(tables))

    def edge_between(self, a: int, b: int) -> JoinEdge:
        return self.graph.edges[a, b]['edge']

    def validate(self) -> None:
        """Проверка инвариантов схемы; при нарушении - ConfigurationError"""
        if not self.tables:
            raise ConfigurationError("Схема не содержит таблиц")
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Имена таблиц не уникальны: {names}")
        for table in self.tables:
            if table.row_count < 1:
                raise ConfigurationError(f"Таблица {table.name}: row_count должен быть >= 1")
            attr_names = [a.name for a in table.attributes]
            if len(set(attr_names)) != len(attr_names):
                raise ConfigurationError(f"Таблица {table.name}: имена атрибутов не уникальны")
            for key in table.key_attributes:
                if key not in attr_names:
                    raise ConfigurationError(f"Таблица {table.name}: ключ {key} не объявлен среди атрибутов")
            for attr in table.attributes:
                _validate_attribute(table.name, attr)
        if self.m == 0:
            raise ConfigurationError("В схеме нет ни одного некключевого атрибута")

        seen_pairs = set()
        for edge in self.join_edges:
            for ti, key in ((edge.left_table, edge.left_key), (edge.right_table, edge.right_key)):
                if not 0 <= ti < self.n:
                    raise ConfigurationError(f"Ребро ссылается на несуществующую таблицу {ti}")
                if key not in self.tables[ti].key_attributes:
                    raise ConfigurationError(f"{self.tables[ti].name}.{key} не объявлен ключевым атрибутом")
            pair = frozenset((edge.left_table, edge.right_table))
            if len(pair) != 2 or pair in seen_pairs:
                raise ConfigurationError(f"Недопустимое ребро соединения: {edge}")
            seen_pairs.add(pair)
            left = self.tables[edge.left_table].attribute(edge.left_key)
            right = self.tables[edge.right_table].attribute(edge.right_key)
            if max(left.dom_lo, right.dom_lo) > min(left.dom_hi, right.dom_hi):
                raise ConfigurationError(f"Домены ключей ребра {edge} не пересекаются")

        # Допускаются только ациклические связные схемы соединений
        if not nx.is_tree(self.graph):
            raise ConfigurationError("Граф соединений должен быть связным деревом")


def _validate_attribute(table_name: str, attr: AttributeSpec) -> None:
    lo, hi = attr.domain
    if not lo < hi:
        raise ConfigurationError(f"{table_name}.{attr.name}: требуется dom_lo < dom_hi, получено {attr.domain}")
    kind = attr.distribution.get('kind')
    if kind not in DISTRIBUTIONS:
        raise ConfigurationError(f"{table_name}.{attr.name}: неизвестное распределение {kind}")
    if kind == 'zipf' and not float(attr.distribution.get('s', 0)) > 1.0:
        raise ConfigurationError(f"{table_name}.{attr.name}: параметр zipf s должен быть > 1")
    if kind == 'gaussian':
        mu = float(attr.distribution.get('mu', np.nan))
        sigma = float(attr.distribution.get('sigma', np.nan))
        if not lo <= mu <= hi or not sigma > 0:
            raise ConfigurationError(f"{table_name}.{attr.name}: требуется mu в домене и sigma > 0")


def load_schema(path: str) -> Schema:
    """Чтение схемы из JSON-файла"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Не удалось прочитать схему {path}: {e}") from e
    return Schema.from_dict(data)


def save_schema(schema: Schema, path: str) -> None:
    """Запись схемы в JSON-файл"""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(schema.to_dict(), f, ensure_ascii=False, indent=2)


class Database:
    """Неизменяемая сгенерированная база: таблицы как DataFrame"""

    def __init__(self, schema: Schema, tables: Sequence[pd.DataFrame], seed: int):
        self.schema = schema
        self.seed = seed
        self._tables = [frame.copy() for frame in tables]
        self._columns: List[Dict[str, np.ndarray]] = []
        for frame in self._tables:
            columns = {}
            for name in frame.columns:
                values = frame[name].to_numpy(copy=True)
                values.setflags(write=False)
                columns[name] = values
            self._columns.append(columns)
        self._pattern_cache: Dict[FrozenSet[int], int] = {}

    def table(self, index: int) -> pd.DataFrame:
        """Копия строк таблицы"""
        return self._tables[index].copy()

    def column(self, table: int, name: str) -> np.ndarray:
        return self._columns[table][name]

    @cached_property
    def fingerprint(self) -> str:
        """Идентификатор базы по схеме и зерну генерации"""
        payload = json.dumps({'schema': self.schema.to_dict(), 'seed': self.seed}, sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]

    def max_cardinality(self, tables: Iterable[int]) -> int:
        """Кардинальность соединения шаблона без предикатов (кешируется)"""
        return join_pattern_cardinality(self, tables)


def _draw_column(rng: np.random.Generator, attr: AttributeSpec, size: int) -> np.ndarray:
    lo, hi = attr.dom_lo, attr.dom_hi
    kind = attr.distribution['kind']
    if kind == 'uniform':
        if attr.integer:
            return rng.integers(int(np.ceil(lo)), int(np.floor(hi)) + 1, size=size).astype(float)
        return rng.uniform(lo, hi, size=size)
    if kind == 'zipf':
        # Хвост zipf обрезается верхней границей домена
        ranks = rng.zipf(float(attr.distribution['s']), size=size)
        return np.minimum(lo + ranks - 1, hi).astype(float)
    values = rng.normal(float(attr.distribution['mu']), float(attr.distribution['sigma']), size=size)
    if attr.integer:
        values = np.round(values)
    return np.clip(values, lo, hi)


def _key_anchors(schema: Schema) -> Dict[Tuple[int, str], float]:
    """Общее значение ключа для первой строки каждой таблицы в компоненте ключей"""
    key_graph = nx.Graph()
    for edge in schema.join_edges:
        key_graph.add_edge((edge.left_table, edge.left_key), (edge.right_table, edge.right_key))
    anchors = {}
    for component in nx.connected_components(key_graph):
        specs = [schema.tables[ti].attribute(key) for ti, key in component]
        anchor = max(np.ceil(s.dom_lo) for s in specs)
        if anchor > min(s.dom_hi for s in specs):
            raise ConfigurationError(f"Нет общего значения ключа для компоненты {sorted(component)}")
        for node in component:
            anchors[node] = float(anchor)
    return anchors


def generate_database(schema: Schema, seed: int) -> Database:
    """
    Генерация синтетической базы данных по схеме

    Args:
        schema: Валидная схема
        seed: Зерно генерации

    Returns:
        Database, детерминированно зависящая от (schema, seed)
    """
    schema.validate()
    anchors = _key_anchors(schema)
    # Независимый поток на таблицу
    streams = np.random.SeedSequence(seed).spawn(schema.n)
    frames = []
    for ti, table in enumerate(schema.tables):
        rng = np.random.default_rng(streams[ti])
        data = {}
        for attr in table.attributes:
            values = _draw_column(rng, attr, table.row_count)
            if (ti, attr.name) in anchors:
                # Первая строка каждой таблицы соединяется со всеми соседями,
                # поэтому любой шаблон имеет ненулевую кардинальность
                values[0] = anchors[(ti, attr.name)]
            data[attr.name] = values
        frames.append(pd.DataFrame(data))
    db = Database(schema, frames, seed)
    logger.info(f"Сгенерирована база {db.fingerprint}: "
                f"{', '.join(f'{t.name}={t.row_count}' for t in schema.tables)}")
    return db


def _predicate_mask(values: np.ndarray, attr: AttributeSpec, lb: float, ub: float) -> np.ndarray:
    lo = attr.dom_lo + lb * (attr.dom_hi - attr.dom_lo)
    mask = values >= lo
    if ub < 1.0:
        hi = attr.dom_lo + ub * (attr.dom_hi - attr.dom_lo)
        mask &= values < hi
    return mask


def count_rows(db: Database, tables: Iterable[int], predicates: Mapping[str, Tuple[float, float]]) -> int:
    """
    Точный подсчёт строк соединения с фильтрами (хеш-агрегация по дереву соединения)

    Args:
        db: База данных
        tables: Индексы таблиц шаблона соединения
        predicates: Нормализованные диапазоны по полным именам атрибутов

    Returns:
        Число строк результата
    """
    schema = db.schema
    tables = frozenset(tables)
    if not schema.is_connected(tables):
        raise InvalidQueryError(f"Шаблон соединения пуст или несвязен: {sorted(tables)}")

    # Вес строки - число её продолжений в поддереве соединения
    weights = {t: np.ones(schema.tables[t].row_count, dtype=np.int64) for t in tables}
    for name, (lb, ub) in predicates.items():
        if name not in schema.attribute_index:
            raise InvalidQueryError(f"Неизвестный атрибут {name}")
        if not 0.0 <= lb <= ub <= 1.0:
            raise InvalidQueryError(f"Границы {name} вне [0, 1] или lb > ub: ({lb}, {ub})")
        ti, attr = schema.attributes[schema.attribute_index[name]]
        if ti not in tables:
            raise InvalidQueryError(f"Предикат на атрибут {name} таблицы вне соединения")
        weights[ti] = weights[ti] * _predicate_mask(db.column(ti, attr.name), attr, lb, ub)

    root = min(tables)
    if len(tables) == 1:
        return int(weights[root].sum())

    tree = schema.graph.subgraph(tables)
    # Сворачиваем дерево от листьев к корню
    parents = nx.dfs_predecessors(tree, root)
    for node in nx.dfs_postorder_nodes(tree, root):
        if node == root:
            continue
        parent = parents[node]
        parent_key, child_key = schema.edge_between(parent, node).keys_from(parent)
        child_weights = weights[node]
        selected = child_weights > 0
        keys = db.column(node, child_key)[selected]
        if keys.size == 0:
            weights[parent] = np.zeros_like(weights[parent])
            continue
        # Суммы весов потомка по значению ключа
        uniq, inverse = np.unique(keys, return_inverse=True)
        sums = np.zeros(uniq.size, dtype=np.int64)
        np.add.at(sums, inverse, child_weights[selected])
        parent_keys = db.column(parent, parent_key)
        pos = np.clip(np.searchsorted(uniq, parent_keys), 0, uniq.size - 1)
        # Строка родителя без пары в потомке обнуляется
        factor = np.where(uniq[pos] == parent_keys, sums[pos], 0)
        weights[parent] = weights[parent] * factor
    return int(weights[root].sum())


def true_cardinality(db: Database, query: Any) -> int:
    """
    Точная кардинальность запроса (аналог COUNT(*))

    Args:
        db: База данных
        query: Запрос с полями tables и predicates

    Returns:
        Неотрицательное число строк
    """
    return count_rows(db, query.tables, query.predicates)


def join_pattern_cardinality(db: Database, tables: Iterable[int]) -> int:
    """Кардинальность шаблона без предикатов; знаменатель нормализации меток"""
    key = frozenset(tables)
    cached = db._pattern_cache.get(key)
    if cached is None:
        cached = count_rows(db, key, {})
        db._pattern_cache[key] = cached
    return cached


def load_preset(name: str, overrides: Optional[Mapping[str, Any]] = None) -> Schema:
    """Схема из встроенных пресетов config.SCHEMA_PRESETS"""
    if name not in SCHEMA_PRESETS:
        raise ConfigurationError(f"Неизвестный пресет схемы: {name}. Доступны: {list(SCHEMA_PRESETS)}")
    # Глубокая копия пресета
    data = json.loads(json.dumps(SCHEMA_PRESETS[name]))
    if overrides:
        data.update(overrides)
    return Schema.from_dict(data)
