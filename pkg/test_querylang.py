#!/usr/bin/env python3
"""
Тесты запросов: кодирование, декодирование, генерация нагрузки и дивергенция
"""

import os
import sys

import numpy as np
import pytest

# Добавляем текущую директорию в path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from services.datastore import Schema
from services.querylang import (
    Query,
    QueryEncoding,
    Workload,
    WorkloadPolicy,
    decode,
    encode,
    encode_workload,
    generate_workload,
    is_valid_join,
    js_divergence,
    random_query,
    workload_policy_from_config,
)
from utils.error_handler import (
    ConfigurationError,
    DimensionMismatchError,
    InvalidEncodingError,
    InvalidQueryError,
)

TWO_TABLES = {
    'tables': [
        {'name': 't1', 'row_count': 10,
         'attributes': [{'name': 'id', 'domain': [1, 10]}, {'name': 'a', 'domain': [0, 1]},
                        {'name': 'b', 'domain': [0, 1]}],
         'key_attributes': ['id']},
        {'name': 't2', 'row_count': 10,
         'attributes': [{'name': 't1_id', 'domain': [1, 10]}, {'name': 'c', 'domain': [0, 1]}],
         'key_attributes': ['t1_id']},
    ],
    'join_edges': [[0, 'id', 1, 't1_id']],
}


@pytest.fixture(scope='module')
def two_tables():
    return Schema.from_dict(TWO_TABLES)


def test_encode_join_with_predicate(two_tables):
    encoding = encode(Query(tables={0, 1}, predicates={'t1.a': (0.2, 0.5)}), two_tables)
    assert encoding.x_join.tolist() == [1.0, 1.0]
    assert encoding.x_sel.tolist() == [0.2, 0.5, 0.0, 1.0, 0.0, 1.0]
    assert encoding.x.shape == (two_tables.n + 2 * two_tables.m,)


def test_encode_masks_absent_tables(two_tables):
    encoding = encode(Query(tables={0}), two_tables)
    assert encoding.x_join.tolist() == [1.0, 0.0]
    assert encoding.x_sel.tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]


def test_encode_rejects_predicate_outside_join(two_tables):
    with pytest.raises(InvalidQueryError):
        encode(Query(tables={0}, predicates={'t2.c': (0.1, 0.3)}), two_tables)


def test_query_rejects_inverted_bounds():
    with pytest.raises(InvalidQueryError):
        Query(tables={0}, predicates={'t1.a': (0.6, 0.2)})


def test_decode_inverts_example(two_tables):
    query = decode([1, 1, 0.2, 0.5, 0, 1, 0, 1], two_tables)
    assert query == Query(tables={0, 1}, predicates={'t1.a': (0.2, 0.5)})


def test_decode_errors(two_tables):
    with pytest.raises(InvalidEncodingError):
        decode([0, 0, 0, 1, 0, 1, 0, 1], two_tables)
    with pytest.raises(InvalidEncodingError):
        decode([1, 0, 0, 1, 0, 1, 0.3, 0.4], two_tables)
    with pytest.raises(InvalidEncodingError):
        decode([1, 1, 0.7, 0.2, 0, 1, 0, 1], two_tables)
    with pytest.raises(DimensionMismatchError):
        decode([1, 1, 0, 1], two_tables)


def _round_trip(schema, count, seed):
    """decode(encode(q)) == q и encode(decode(x)) == x"""
    rng = np.random.default_rng(seed)
    patterns = schema.join_patterns
    for _ in range(count):
        tables = patterns[rng.integers(len(patterns))]
        query = random_query(rng, schema, tables, int(rng.integers(0, 4)), 0.01, 1.0)
        encoding = encode(query, schema)
        assert decode(encoding, schema) == query
        assert encode(decode(encoding.x, schema), schema) == encoding
    print(f'✅ {count} запросов прошли круг кодирования')


def test_round_trip_on_random_queries(chain_schema):
    _round_trip(chain_schema, 2000, seed=4)


@pytest.mark.slow
def test_round_trip_on_ten_thousand_queries(chain_schema):
    _round_trip(chain_schema, 10_000, seed=5)


def test_is_valid_join_on_chain(chain_schema):
    assert not is_valid_join([1, 0, 1], chain_schema)
    assert is_valid_join([1, 1, 0], chain_schema)
    assert not is_valid_join([0, 0, 0], chain_schema)
    assert is_valid_join([1, 1, 1], chain_schema)
    assert not is_valid_join([1, 1], chain_schema)


def test_generate_workload_labels_and_determinism(single_db):
    first = generate_workload(single_db, 100, seed=9)
    second = generate_workload(single_db, 100, seed=9)
    assert len(first) == 100
    assert all(y > 0 for y in first.labels), "❌ В нагрузке есть пустые запросы"
    assert first.queries == second.queries and first.labels == second.labels


def test_workload_policy_validation(single_schema):
    with pytest.raises(ConfigurationError):
        WorkloadPolicy(width_min=0.5, width_max=0.1)
    with pytest.raises(ConfigurationError):
        WorkloadPolicy(pattern_weights=(1.0, 2.0)).weights_for(single_schema)
    with pytest.raises(ConfigurationError):
        workload_policy_from_config({'unknown': 1})


def test_labeled_workload_rejects_zero_labels():
    with pytest.raises(InvalidQueryError):
        Workload([Query(tables={0})], [0], provenance='train')
    poison = Workload([Query(tables={0})], [0], provenance='poison')
    assert len(poison.without_empty()) == 0


def test_workload_split(single_train):
    parts = single_train.split(5)
    assert len(parts) == 5
    assert sum(len(p) for p in parts) == len(single_train)
    with pytest.raises(ConfigurationError):
        single_train.split(len(single_train) + 1)


def test_js_divergence_identical_and_disjoint():
    a = np.random.default_rng(0).uniform(size=(50, 4))
    assert js_divergence(a, a) == pytest.approx(0.0, abs=1e-12)
    low = np.full((10, 1), 0.01)
    high = np.full((10, 1), 0.99)
    assert js_divergence(low, high) == pytest.approx(1.0)


def test_js_divergence_is_symmetric_and_bounded(single_db, single_train):
    schema = single_db.schema
    a = encode_workload(single_train, schema)
    b = np.random.default_rng(1).uniform(size=a.shape)
    forward, backward = js_divergence(a, b), js_divergence(b, a)
    assert forward == pytest.approx(backward)
    assert 0.0 <= forward <= 1.0


def test_js_divergence_accepts_encodings(two_tables):
    encodings = [encode(Query(tables={0}), two_tables), encode(Query(tables={0, 1}), two_tables)]
    assert isinstance(encodings[0], QueryEncoding)
    assert js_divergence(encodings, encodings) == pytest.approx(0.0, abs=1e-12)


def test_js_divergence_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        js_divergence(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(InvalidEncodingError):
        js_divergence(np.zeros((0, 2)), np.zeros((3, 2)))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
