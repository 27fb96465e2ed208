#!/usr/bin/env python3
"""
Тесты CLI лаборатории и форматирования вывода
"""

import json
import os
import sys

import pandas as pd
import pytest

# Добавляем текущую директорию в path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from conftest import TINY_CHAIN
from config import EXIT_CODES
from lab import build_parser, main
from utils.formatters import (
    format_attack_report,
    format_incremental,
    format_ratio,
    format_seconds,
    format_speculation,
    format_table,
)


def _run(out_dir, *argv):
    return main(['--out-dir', str(out_dir), '--seed', '3', *argv])


def test_cli_pipeline(tmp_path):
    """data gen -> workload gen -> ce train/eval -> baseline -> detector"""
    schema_path = tmp_path / 'chain.json'
    schema_path.write_text(json.dumps(TINY_CHAIN), encoding='utf-8')
    out = tmp_path / 'run'
    db = str(out / 'db.npz')

    assert _run(out, 'data', 'gen', '--schema', str(schema_path), '--output', 'db.npz') == EXIT_CODES['success']
    assert _run(out, 'workload', 'gen', '--data', db, '--count', '60', '--output', 'train.jsonl') == 0
    assert _run(out, 'workload', 'gen', '--data', db, '--count', '20', '--provenance', 'test',
                '--output', 'test.jsonl') == 0
    assert _run(out, 'ce', 'train', '--family', 'LINEAR', '--data', db, '--workload', str(out / 'train.jsonl'),
                '--epochs', '2', '--output', 'model.pt') == 0
    assert _run(out, 'ce', 'eval', '--model', str(out / 'model.pt'), '--data', db,
                '--workload', str(out / 'test.jsonl')) == 0
    with open(out / 'eval.json', encoding='utf-8') as f:
        assert len(json.load(f)['per_query']) == 20

    assert _run(out, 'attack', 'baseline', '--method', 'random', '--data', db, '--surrogate', str(out / 'model.pt'),
                '--budget', '5', '--output', 'poison.jsonl') == 0
    with open(out / 'poison.jsonl', encoding='utf-8') as f:
        assert len(f.readlines()) == 5

    assert _run(out, 'detector', 'train', '--data', db, '--workload', str(out / 'train.jsonl'),
                '--output', 'detector.pt') == 0
    assert _run(out, 'detector', 'score', '--detector', str(out / 'detector.pt'), '--data', db,
                '--workload', str(out / 'poison.jsonl')) == 0
    scores = pd.read_csv(out / 'scores.csv')
    assert list(scores.columns) == ['query', 'reconstruction_error', 'abnormal']
    print('✅ Конвейер CLI отработал')


def test_cli_error_codes(tmp_path):
    assert main([]) == EXIT_CODES['config_error']
    assert _run(tmp_path, 'data', 'gen', '--schema', 'no-such-preset') == EXIT_CODES['config_error']
    assert _run(tmp_path, 'ce', 'eval', '--model', str(tmp_path / 'none.pt'), '--data', str(tmp_path / 'none.npz'),
                '--workload', str(tmp_path / 'none.jsonl')) == EXIT_CODES['config_error']
    assert _run(tmp_path, '--config', str(tmp_path / 'missing.json'), 'experiment', 'run') == EXIT_CODES['config_error']


def test_parser_choices():
    parser = build_parser()
    args = parser.parse_args(['experiment', 'sweep', '--parameter', 'epsilon', '--values', '0', '0.1'])
    assert args.parameter == 'epsilon' and args.values == ['0', '0.1']
    assert parser.parse_args(['experiment', 'compare', '--strict']).strict
    assert not parser.parse_args(['experiment', 'compare']).strict
    with pytest.raises(SystemExit):
        parser.parse_args(['experiment', 'sweep', '--parameter', 'dropout', '--values', '1'])
    with pytest.raises(SystemExit):
        parser.parse_args(['attack', 'baseline', '--method', 'copycat', '--data', 'x', '--surrogate', 'y',
                           '--budget', '1'])


SUMMARY = {'mean': 2.0, 'p50': 1.5, 'p90': 3.0, 'p95': 3.5, 'p99': 4.0, 'max': 5.0}


def test_format_attack_report():
    report = {
        'database': 'abc123', 'budget': 250, 'black_box_family': 'FCN', 'surrogate_family': 'MSCN',
        'clean': SUMMARY,
        'methods': {'pace': {**SUMMARY, 'mean': 6.0, 'ratio': 3.0, 'divergence': 0.01, 'poison_count': 250}},
        'overhead': {'train_time_s': 12.0, 'generation_time_s': 75.0, 'attack_time_s': 0.5},
        'counters': {'algorithm': 'accelerated', 'generator_steps': 20, 'surrogate_updates': 10, 'total_steps': 30},
    }
    text = format_attack_report(report)
    assert 'abc123' in text and 'x3.00' in text
    assert '1m 15s' in text
    assert 'всего 30' in text


def test_small_formatters():
    assert format_ratio(2.5) == 'x2.50'
    assert format_seconds(3.21) == '3.2s'
    table = pd.DataFrame({'value': [1, 2], 'ratio': [1.5, 2.25]})
    assert 'divergence' not in format_table(table, 'Развёртка', ['value', 'divergence'])
    assert 'раунд 2' in format_incremental([{'clean': SUMMARY, 'methods': {'pace': {'mean': 3.0, 'ratio': 1.5}}}] * 2)
    text = format_speculation({'chosen': 'FCN', 'tie': True, 'cosines': {'FCN': 0.99, 'LSTM': 0.5}})
    assert text.index('FCN: 0.9900') < text.index('LSTM: 0.5000')
    assert 'ничья' in text


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
