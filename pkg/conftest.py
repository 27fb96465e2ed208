"""
Общие фикстуры тестов: маленькие схемы, базы и обученные модели
"""

import os
import sys

import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import RUN_SLOW_TESTS
from services.datastore import Schema, generate_database, true_cardinality
from services.estimators import LabelNormalizer, build_model, train
from services.querylang import generate_workload

TINY_SINGLE = {
    'tables': [
        {
            'name': 'cars',
            'row_count': 400,
            'attributes': [
                {'name': 'year', 'domain': [2000, 2020], 'integer': True,
                 'distribution': {'kind': 'gaussian', 'mu': 2012, 'sigma': 4}},
                {'name': 'weight', 'domain': [0, 100], 'distribution': {'kind': 'uniform'}},
                {'name': 'county', 'domain': [1, 20], 'integer': True,
                 'distribution': {'kind': 'zipf', 's': 1.8}},
            ],
            'key_attributes': [],
        },
    ],
    'join_edges': [],
}

TINY_CHAIN = {
    'tables': [
        {
            'name': 'a',
            'row_count': 60,
            'attributes': [
                {'name': 'id', 'domain': [1, 30], 'integer': True, 'distribution': {'kind': 'uniform'}},
                {'name': 'x', 'domain': [0, 1], 'distribution': {'kind': 'uniform'}},
            ],
            'key_attributes': ['id'],
        },
        {
            'name': 'b',
            'row_count': 80,
            'attributes': [
                {'name': 'a_id', 'domain': [1, 30], 'integer': True, 'distribution': {'kind': 'uniform'}},
                {'name': 'c_id', 'domain': [1, 10], 'integer': True, 'distribution': {'kind': 'uniform'}},
                {'name': 'y', 'domain': [0, 10], 'distribution': {'kind': 'uniform'}},
            ],
            'key_attributes': ['a_id', 'c_id'],
        },
        {
            'name': 'c',
            'row_count': 40,
            'attributes': [
                {'name': 'id', 'domain': [1, 10], 'integer': True, 'distribution': {'kind': 'uniform'}},
                {'name': 'z', 'domain': [0, 5], 'distribution': {'kind': 'uniform'}},
            ],
            'key_attributes': ['id'],
        },
    ],
    'join_edges': [
        [0, 'id', 1, 'a_id'],
        [1, 'c_id', 2, 'id'],
    ],
}


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: долгие приёмочные тесты (RUN_SLOW_TESTS=true)')


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW_TESTS:
        return
    skip_slow = pytest.mark.skip(reason='долгий тест: установите RUN_SLOW_TESTS=true')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope='session')
def single_schema():
    return Schema.from_dict(TINY_SINGLE)


@pytest.fixture(scope='session')
def chain_schema():
    return Schema.from_dict(TINY_CHAIN)


@pytest.fixture(scope='session')
def single_db(single_schema):
    return generate_database(single_schema, seed=3)


@pytest.fixture(scope='session')
def chain_db(chain_schema):
    return generate_database(chain_schema, seed=5)


@pytest.fixture(scope='session')
def single_train(single_db):
    return generate_workload(single_db, 300, seed=1, provenance='train')


@pytest.fixture(scope='session')
def single_test(single_db):
    return generate_workload(single_db, 40, seed=2, provenance='test')


@pytest.fixture(scope='session')
def trained_fcn(single_db, single_train):
    model = build_model('FCN', single_db.schema, {'hidden_scale': 0.25}, seed=0,
                        normalizer=LabelNormalizer.from_database(single_db))
    return train(model, single_train, epochs=5, seed=0, patience=None)


@pytest.fixture
def label_fn(single_db):
    def count(query):
        return true_cardinality(single_db, query)
    return count
