#!/usr/bin/env python3
"""
Тесты синтетической базы и точного подсчёта кардинальности
"""

import os
import sys

import numpy as np
import pandas as pd
import pytest

# Добавляем текущую директорию в path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from services.datastore import (
    Database,
    Schema,
    count_rows,
    generate_database,
    join_pattern_cardinality,
    load_preset,
    true_cardinality,
)
from services.querylang import Query, random_query
from utils.error_handler import ConfigurationError, InvalidQueryError


def _tiny_table(values):
    schema = Schema.from_dict({
        'tables': [{'name': 't', 'row_count': len(values),
                    'attributes': [{'name': 'a', 'domain': [0, 10]}]}],
    })
    return Database(schema, [pd.DataFrame({'a': np.asarray(values, dtype=float)})], seed=0)


def _two_tables(left_keys, right_keys):
    schema = Schema.from_dict({
        'tables': [
            {'name': 't1', 'row_count': len(left_keys),
             'attributes': [{'name': 'k', 'domain': [1, 5]}, {'name': 'v', 'domain': [0, 1]}],
             'key_attributes': ['k']},
            {'name': 't2', 'row_count': len(right_keys),
             'attributes': [{'name': 'k', 'domain': [1, 5]}, {'name': 'w', 'domain': [0, 1]}],
             'key_attributes': ['k']},
        ],
        'join_edges': [[0, 'k', 1, 'k']],
    })
    frames = [
        pd.DataFrame({'k': np.asarray(left_keys, dtype=float), 'v': np.full(len(left_keys), 0.5)}),
        pd.DataFrame({'k': np.asarray(right_keys, dtype=float), 'w': np.full(len(right_keys), 0.5)}),
    ]
    return Database(schema, frames, seed=0)


def _filtered(db, ti, query):
    """Строки таблицы ti, прошедшие предикаты запроса"""
    schema = db.schema
    frame = db.table(ti)
    keep = np.ones(len(frame), dtype=bool)
    for name, (lb, ub) in query.predicates.items():
        table_name, attr_name = name.split('.')
        if table_name != schema.tables[ti].name:
            continue
        attr = schema.tables[ti].attribute(attr_name)
        lo = attr.dom_lo + lb * (attr.dom_hi - attr.dom_lo)
        hi = attr.dom_lo + ub * (attr.dom_hi - attr.dom_lo)
        values = frame[attr_name].to_numpy()
        keep &= values >= lo
        if ub < 1.0:
            keep &= values < hi
    return frame[keep].add_prefix(f"{ti}.")


def _merge_oracle(db, query):
    """Независимый подсчёт: последовательные pandas-соединения по рёбрам шаблона"""
    schema = db.schema
    tables = sorted(query.tables)
    joined = _filtered(db, tables[0], query)
    done = {tables[0]}
    while len(done) < len(tables):
        for edge in schema.join_edges:
            pair = (edge.left_table, edge.right_table)
            if pair[0] in done and pair[1] in query.tables and pair[1] not in done:
                inner, outer = pair
            elif pair[1] in done and pair[0] in query.tables and pair[0] not in done:
                outer, inner = pair
            else:
                continue
            inner_key, outer_key = edge.keys_from(inner)
            other = _filtered(db, outer, query)
            joined = joined.merge(other, left_on=f"{inner}.{inner_key}", right_on=f"{outer}.{outer_key}")
            done.add(outer)
    return len(joined)


def test_generate_database_is_deterministic(single_schema):
    """Одинаковое зерно - одинаковые строки, разное зерно - разные"""
    first = generate_database(single_schema, seed=7)
    second = generate_database(single_schema, seed=7)
    other = generate_database(single_schema, seed=8)
    assert first.table(0).equals(second.table(0)), "❌ Повторная генерация дала другие строки"
    assert not first.table(0).equals(other.table(0)), "❌ Разные зёрна дали одинаковые строки"
    assert first.fingerprint == second.fingerprint
    print('✅ Генерация детерминирована')


def test_generated_values_respect_domains(single_db):
    for table_index, table in enumerate(single_db.schema.tables):
        for attr in table.attributes:
            values = single_db.column(table_index, attr.name)
            assert values.min() >= attr.dom_lo and values.max() <= attr.dom_hi
            if attr.integer:
                assert np.all(values == np.round(values))


def test_join_pattern_is_nonempty_after_generation(chain_db):
    for pattern in chain_db.schema.join_patterns:
        assert join_pattern_cardinality(chain_db, pattern) > 0, f"❌ Пустой шаблон {sorted(pattern)}"


def test_unbounded_predicate_counts_all_rows():
    db = _tiny_table([1, 2, 3])
    assert true_cardinality(db, Query(tables={0}, predicates={'t.a': (0.0, 1.0)})) == 3


def test_half_open_range_count():
    """Значения {1,2,3}, домен [0,10], границы (0.15, 0.35) - диапазон [1.5, 3.5)"""
    db = _tiny_table([1, 2, 3])
    assert true_cardinality(db, Query(tables={0}, predicates={'t.a': (0.15, 0.35)})) == 2


def test_upper_bound_one_is_inclusive():
    db = _tiny_table([0, 5, 10])
    assert true_cardinality(db, Query(tables={0}, predicates={'t.a': (0.5, 1.0)})) == 2


def test_two_table_key_join():
    """Ключи {1,1,2} и {1,2,2}: 2*1 + 1*2 = 4 строки"""
    db = _two_tables([1, 1, 2], [1, 2, 2])
    assert true_cardinality(db, Query(tables={0, 1})) == 4
    assert join_pattern_cardinality(db, {0, 1}) == 4
    assert join_pattern_cardinality(db, {0}) == 3


def test_disconnected_or_empty_join_is_rejected(chain_db):
    with pytest.raises(InvalidQueryError):
        count_rows(chain_db, {0, 2}, {})
    with pytest.raises(InvalidQueryError):
        count_rows(chain_db, set(), {})


def test_predicate_outside_join_is_rejected(chain_db):
    with pytest.raises(InvalidQueryError):
        count_rows(chain_db, {0}, {'c.z': (0.1, 0.5)})


def test_matches_merge_oracle_on_random_queries(chain_db):
    """Хеш-агрегация по дереву совпадает с прямыми соединениями"""
    rng = np.random.default_rng(11)
    patterns = chain_db.schema.join_patterns
    for _ in range(1000):
        tables = patterns[rng.integers(len(patterns))]
        query = random_query(rng, chain_db.schema, tables, int(rng.integers(0, 3)), 0.05, 1.0)
        assert true_cardinality(chain_db, query) == _merge_oracle(chain_db, query), f"❌ Расхождение на {query}"
    print('✅ 1000 запросов совпали с независимым подсчётом')


def test_shrinking_predicate_never_increases_count(chain_db):
    rng = np.random.default_rng(12)
    patterns = chain_db.schema.join_patterns
    for _ in range(200):
        tables = patterns[rng.integers(len(patterns))]
        query = random_query(rng, chain_db.schema, tables, 1, 0.05, 1.0)
        name, (lb, ub) = next(iter(query.predicates.items()))
        width = ub - lb
        narrower = Query(tables=query.tables, predicates={
            **query.predicates, name: (lb + rng.uniform(0, 0.5) * width, ub - rng.uniform(0, 0.5) * width)})
        assert true_cardinality(chain_db, narrower) <= true_cardinality(chain_db, query)


def test_schema_validation_errors():
    with pytest.raises(ConfigurationError):
        Schema.from_dict({'tables': [{'name': 't', 'row_count': 10,
                                      'attributes': [{'name': 'a', 'domain': [5, 1]}]}]})
    with pytest.raises(ConfigurationError):
        Schema.from_dict({'tables': [{'name': 't', 'row_count': 10,
                                      'attributes': [{'name': 'a', 'domain': [1, 5],
                                                      'distribution': {'kind': 'zipf', 's': 0.5}}]}]})
    with pytest.raises(ConfigurationError):
        load_preset('no-such-preset')


def test_presets_are_valid():
    for name in ('single-table', 'multi-table'):
        schema = load_preset(name)
        assert schema.m > 0
        assert all(schema.is_connected(p) for p in schema.join_patterns)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
