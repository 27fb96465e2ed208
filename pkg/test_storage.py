#!/usr/bin/env python3
"""
Тесты сохранения и загрузки: база, контрольные точки, нагрузки и отчёты
"""

import json
import os
import sys

import numpy as np
import pandas as pd
import pytest
import torch

# Добавляем текущую директорию в path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from services.datastore import true_cardinality
from services.detector import reconstruction_errors, train_detector
from services.poisongen import GenTrainConfig, build_generator, sample_noise, sample_queries
from services.querylang import Workload, encode_workload, generate_workload
from services.storage import (
    load_checkpoint,
    load_database,
    load_workload,
    save_checkpoint,
    save_database,
    save_report,
    save_table,
    save_workload,
)
from utils.error_handler import ConfigurationError, InvalidQueryError


def test_database_round_trip(tmp_path, chain_db):
    path = str(tmp_path / 'db' / 'chain.npz')
    save_database(chain_db, path)
    assert os.path.exists(str(tmp_path / 'db' / 'chain.schema.json'))
    restored = load_database(path)
    assert restored.fingerprint == chain_db.fingerprint
    for i, table in enumerate(chain_db.schema.tables):
        for attr in table.attributes:
            assert np.array_equal(restored.column(i, attr.name), chain_db.column(i, attr.name))
    for query in generate_workload(chain_db, 20, seed=3).queries:
        assert true_cardinality(restored, query) == true_cardinality(chain_db, query)


def test_missing_database(tmp_path):
    with pytest.raises(ConfigurationError):
        load_database(str(tmp_path / 'none.npz'))


def test_model_checkpoint_round_trip(tmp_path, trained_fcn, single_test):
    path = str(tmp_path / 'model.pt')
    save_checkpoint(trained_fcn, path)
    restored = load_checkpoint(path)
    assert restored.family == trained_fcn.family
    assert np.array_equal(restored.parameter_vector(), trained_fcn.parameter_vector())
    assert restored.training_curve == trained_fcn.training_curve
    X = torch.from_numpy(encode_workload(single_test, trained_fcn.schema))
    with torch.no_grad():
        assert torch.equal(restored(X), trained_fcn(X))


def test_detector_checkpoint_round_trip(tmp_path, single_db, single_train):
    X = encode_workload(single_train.subset(range(80)), single_db.schema)
    detector = train_detector(X, epochs=2, seed=1, epsilon=0.07)
    path = str(tmp_path / 'detector.pt')
    save_checkpoint(detector, path)
    restored = load_checkpoint(path)
    assert restored.epsilon == 0.07
    assert np.allclose(reconstruction_errors(restored, X), reconstruction_errors(detector, X))


def test_generator_checkpoint_round_trip(tmp_path, chain_schema):
    cfg = GenTrainConfig(noise_dim=4, hidden_dim=8, layers=(2, 3, 2))
    g = build_generator(chain_schema, cfg, seed=2)
    path = str(tmp_path / 'generator.pt')
    with pytest.raises(ConfigurationError):
        save_checkpoint(g, path)
    save_checkpoint(g, path, schema=chain_schema)
    restored = load_checkpoint(path)
    Z = sample_noise(6, 4, torch.Generator().manual_seed(0))
    with torch.no_grad():
        first = sample_queries(g, Z, chain_schema, generator=torch.Generator().manual_seed(1))
        second = sample_queries(restored, Z, chain_schema, generator=torch.Generator().manual_seed(1))
    assert np.array_equal(first.encodings(), second.encodings())


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_checkpoint(str(tmp_path / 'none.pt'))
    with pytest.raises(ConfigurationError):
        save_checkpoint(object(), str(tmp_path / 'object.pt'))
    stale = str(tmp_path / 'stale.pt')
    torch.save({'format_version': 0, 'kind': 'ce_model', 'metadata': {}, 'state_dict': {}}, stale)
    with pytest.raises(ConfigurationError):
        load_checkpoint(stale)


def test_workload_round_trip(tmp_path, chain_db):
    workload = generate_workload(chain_db, 25, seed=8, provenance='poison')
    path = str(tmp_path / 'poison.jsonl')
    save_workload(workload, path, chain_db.schema)
    restored = load_workload(path, chain_db.schema, provenance='poison')
    assert restored.queries == workload.queries
    assert restored.labels == workload.labels
    with open(path, encoding='utf-8') as f:
        first = json.loads(f.readline())
    assert set(first) == {'tables', 'predicates', 'cardinality'}
    assert all(isinstance(name, str) for name in first['tables'])


def test_workload_errors(tmp_path, chain_db):
    schema = chain_db.schema
    with pytest.raises(ConfigurationError):
        load_workload(str(tmp_path / 'none.jsonl'), schema)
    with pytest.raises(ConfigurationError):
        load_workload(str(tmp_path / 'none.jsonl'), schema, provenance='unknown')
    broken = tmp_path / 'broken.jsonl'
    broken.write_text('{"tables": ["nope"], "predicates": {}}\n', encoding='utf-8')
    with pytest.raises(InvalidQueryError):
        load_workload(str(broken), schema)
    disconnected = tmp_path / 'disconnected.jsonl'
    disconnected.write_text(json.dumps({'tables': ['a', 'c'], 'predicates': {}}) + '\n', encoding='utf-8')
    with pytest.raises(InvalidQueryError):
        load_workload(str(disconnected), schema)


def test_unlabeled_workload_round_trip(tmp_path, chain_db):
    workload = generate_workload(chain_db, 5, seed=9)
    unlabeled = Workload(workload.queries, None, provenance='test')
    path = str(tmp_path / 'test.jsonl')
    save_workload(unlabeled, path, chain_db.schema)
    restored = load_workload(path, chain_db.schema, provenance='test')
    assert restored.labels is None
    assert restored.queries == workload.queries


def test_report_and_table(tmp_path):
    path = save_report({'b': 1, 'a': {'x': 0.5}}, str(tmp_path / 'out'))
    with open(path, encoding='utf-8') as f:
        text = f.read()
    assert text.index('"a"') < text.index('"b"')
    table_path = save_table(pd.DataFrame({'method': ['pace'], 'ratio': [2.5]}), str(tmp_path / 'out'), 'table.csv')
    assert pd.read_csv(table_path)['ratio'].tolist() == [2.5]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
