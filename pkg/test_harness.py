#!/usr/bin/env python3
"""
Тесты оркестрации экспериментов: отчёт, детерминизм, сравнение методов,
инкрементальный сценарий, развёртки и конфигурация
"""

import json
import os
import sys

import numpy as np
import pytest

# Добавляем текущую директорию в path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import FAMILIES
from conftest import TINY_SINGLE
from services.harness import (
    AttackReport,
    Experiment,
    ExperimentConfig,
    chain_violations,
    compare_methods,
    run_experiment,
    run_incremental_scenario,
    run_speculation_trials,
    sweep,
)
from services.poisongen import normalize_trace
from utils.error_handler import AttackOrderingError, ConfigurationError, StageError

FAST = {
    'schema': TINY_SINGLE,
    'train_size': 200,
    'test_size': 30,
    'historical_size': 120,
    'probe_size': 18,
    'black_box_hyperparams': {'hidden_scale': 0.25},
    'surrogate_family': 'FCN',
    'poison_budget': 10,
    'train': {'epochs': 3, 'patience': None},
    'surrogate': {'epochs': 3, 'train_size': 150},
    'detector': {'epochs': 3},
    'speculation': {'candidates': ['LINEAR', 'FCN'], 'candidate_train_size': 100,
                    'candidate_epochs': 2, 'latency_repeats': 1},
    'generator': {'total_steps': 4, 'update_steps': 2, 'noise_dim': 4, 'hidden_dim': 8, 'layers': [2, 2, 2]},
    'update_policy': {'steps': 3},
}


def _config(**overrides):
    return ExperimentConfig.from_dict({**FAST, **overrides})


@pytest.fixture(scope='module')
def report():
    return run_experiment(_config())


def test_report_structure(report):
    assert isinstance(report, AttackReport)
    assert report.clean.mean >= 1.0
    assert report.poisoned['pace'].mean >= 1.0
    assert report.poison_counts == {'pace': 10}
    assert report.budget == 10
    assert 0.0 <= report.divergence['pace'] <= 1.0
    assert report.counters['total_steps'] == 4 + 2
    assert len(report.traces['objective']) == 4
    assert report.speculation is None and report.surrogate_family == 'FCN'
    data = report.to_dict()
    assert set(data['methods']['pace']) >= {'mean', 'p50', 'p99', 'ratio', 'divergence', 'poison_count'}
    json.dumps(data)
    print(f"✅ Q-error {report.clean.mean:.2f} -> {report.poisoned['pace'].mean:.2f}")


def test_overhead_intervals_are_disjoint(report):
    overhead = report.overhead
    assert set(overhead) == {'train_time_s', 'generation_time_s', 'attack_time_s'}
    assert all(value >= 0.0 for value in overhead.values())
    assert overhead['generation_time_s'] > 0.0


def test_report_frame(report):
    table = report.to_frame()
    assert table['method'].tolist() == ['pace']
    assert table.loc[0, 'ratio'] == pytest.approx(report.ratio('pace'))


def test_same_seeds_give_identical_reports(report):
    again = run_experiment(_config())
    assert again.to_dict(include_timing=False) == report.to_dict(include_timing=False)
    assert 'overhead' not in again.to_dict(include_timing=False)


def test_speculation_chooses_surrogate():
    result = run_experiment(_config(surrogate_family=None))
    assert result.surrogate_family in ('LINEAR', 'FCN')
    assert result.speculation['chosen'] == result.surrogate_family
    assert result.to_dict(include_timing=False)['speculation'] == {'chosen': result.surrogate_family}


def test_compare_methods_table():
    table = compare_methods(_config(), ['pace', 'random', 'lb_s'])
    assert table['method'].tolist() == ['pace', 'random', 'lb_s']
    assert isinstance(table.attrs['ordering_holds'], bool)
    assert table['poison_count'].tolist() == [10, 10, 10]
    assert table.attrs['report'].clean.mean >= 1.0
    assert isinstance(table.attrs['chain_holds'], bool)
    assert table.attrs['chain_holds'] == (table.attrs['violations'] == [])
    with pytest.raises(ConfigurationError):
        compare_methods(_config(), ['pace'])


def test_chain_violations_checks_adjacent_present_methods():
    """Цепочка pace >= lb_g >= greedy >= lb_s >= random по присутствующим методам"""
    assert chain_violations({'pace': 9.0, 'lb_g': 6.0, 'greedy': 4.0, 'lb_s': 4.0, 'random': 1.5}) == []
    assert chain_violations({'pace': 654.5, 'lb_g': 62.3, 'greedy': 5.30, 'lb_s': 8.22, 'random': 5.02}) == [
        ('greedy', 'lb_s')]
    # отсутствующий lb_s: greedy сравнивается прямо с random
    assert chain_violations({'pace': 3.0, 'greedy': 1.0, 'random': 2.0}) == [('greedy', 'random')]
    assert chain_violations({'random': 5.0}) == []


def test_strict_compare_raises_on_broken_chain(monkeypatch):
    monkeypatch.setattr('services.harness.chain_violations', lambda means: [('lb_s', 'random')])
    with pytest.raises(AttackOrderingError) as info:
        compare_methods(_config(), ['pace', 'random'], strict=True)
    assert info.value.violations == [('lb_s', 'random')]
    table = compare_methods(_config(), ['pace', 'random'])
    assert table.attrs['chain_holds'] is False


def test_fork_does_not_recount_inherited_stages():
    base = Experiment(_config())
    base.clean()
    assert base.stage_seconds('black_box') > 0.0
    cell = base.fork(_config())
    assert cell.clean() is base.clean()
    assert cell.stage_seconds('black_box') == 0.0
    assert cell.overhead()['train_time_s'] == 0.0


def test_lb_g_generator_training_is_generation_time():
    experiment = Experiment(_config())
    experiment.poison('lb_g')
    overhead = experiment.overhead()
    assert experiment.stage_seconds('generator:lb_g') > 0.0
    assert overhead['generation_time_s'] == pytest.approx(experiment.stage_seconds('generator:lb_g'))
    assert overhead['attack_time_s'] == pytest.approx(experiment.stage_seconds('attack:lb_g'))


def test_incremental_scenario_reuses_chosen_family():
    reports = run_incremental_scenario(_config(surrogate_family=None), parts=2)
    assert len(reports) == 2
    assert all('pace' in r.poisoned for r in reports)
    assert reports[1].surrogate_family == reports[0].surrogate_family
    assert reports[1].speculation is None
    with pytest.raises(ConfigurationError):
        run_incremental_scenario(_config(), parts=1)


def test_sweep_budget_rows():
    table = sweep(_config(), 'poison_budget', [5, 10])
    assert table['value'].tolist() == [5, 10]
    assert {'clean_mean', 'poisoned_mean', 'ratio', 'divergence', 'train_time_s'} <= set(table.columns)
    assert table['clean_mean'].nunique() == 1, "❌ Чистая модель должна переиспользоваться"
    assert table['total_steps'].tolist() == [6, 6]
    # вторая ячейка берёт чёрный ящик и суррогат из первой
    assert table.loc[1, 'train_time_s'] == 0.0


def test_sweep_epsilon_adds_efficiency_column():
    table = sweep(_config(use_detector=False), 'epsilon', [0.0, 1.0])
    assert 'effectiveness_per_divergence' in table.columns
    assert len(table) == 2


def test_sweep_errors():
    with pytest.raises(ConfigurationError):
        sweep(_config(), 'dropout', [0.1])
    with pytest.raises(ConfigurationError):
        sweep(_config(), 'epsilon', [])


def test_speculation_trials():
    table = run_speculation_trials(_config(), ['LINEAR', 'FCN'], trials=2)
    assert table['black_box_family'].tolist() == ['LINEAR', 'FCN']
    assert 0.0 <= table.attrs['accuracy'] <= 1.0
    assert set(table.attrs['per_family']) == {'LINEAR', 'FCN'}


def test_stage_failure_saves_partial_results(tmp_path):
    experiment = Experiment(_config(update_policy={'steps': 0}), str(tmp_path))
    with pytest.raises(StageError) as info:
        experiment.run(['random'])
    assert info.value.stage == 'update:random'
    with open(tmp_path / 'partial.json', encoding='utf-8') as f:
        partial = json.load(f)
    assert 'attack:random' in partial['completed_stages']
    assert partial['metrics']['failed_stages'] == 1


def test_config_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({'shards': 4})
    with pytest.raises(ConfigurationError):
        _config(epsilon=-0.1)
    with pytest.raises(ConfigurationError):
        _config(methods=['pace', 'copycat'])
    with pytest.raises(ConfigurationError):
        _config(poison_fraction=0.0)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(seeds={'data': 1})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({'schema': 'no-such-preset'})
    assert ExperimentConfig().budget == 250
    assert _config(seeds={'data': 1}).seeds['attack'] == ExperimentConfig().seeds['attack']

    broken = tmp_path / 'broken.json'
    broken.write_text('{"train_size": ', encoding='utf-8')
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(str(broken))
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(str(tmp_path / 'missing.json'))
    good = tmp_path / 'good.json'
    good.write_text(json.dumps({'train_size': 300, 'poison_budget': 7}), encoding='utf-8')
    assert ExperimentConfig.from_file(str(good)).budget == 7


def _preset(**overrides):
    """Полноразмерный пресет (5000/500) с суррогатом FCN"""
    return ExperimentConfig.from_dict({'surrogate_family': 'FCN', **overrides})


def _quartile_means(values):
    values = np.asarray(values, dtype=np.float64)
    quarter = max(1, len(values) // 4)
    return values[:quarter].mean(), values[-quarter:].mean()


@pytest.fixture(scope='module')
def preset_report():
    return run_experiment(_preset())


@pytest.mark.slow
def test_clean_fcn_is_sane_on_preset(preset_report):
    assert preset_report.clean.mean <= 5.0, f"❌ Чистый FCN: {preset_report.clean.mean:.2f}"


@pytest.mark.slow
def test_pace_beats_clean_on_single_table(preset_report):
    """Приёмочный прогон: отравление увеличивает ошибку минимум втрое"""
    assert preset_report.ratio('pace') >= 3.0
    print(f"✅ Рост Q-error: x{preset_report.ratio('pace'):.2f}")


@pytest.mark.slow
def test_pace_beats_clean_on_multi_table():
    result = run_experiment(_preset(schema='multi-table'))
    assert result.ratio('pace') >= 5.0
    print(f"✅ Рост Q-error на соединениях: x{result.ratio('pace'):.2f}")


@pytest.mark.slow
def test_generator_objective_grows(preset_report):
    first, last = _quartile_means(normalize_trace(preset_report.traces['objective']))
    assert last > first


@pytest.mark.slow
def test_methods_keep_expected_order():
    table = compare_methods(_preset())
    means = dict(zip(table['method'], table['mean']))
    assert table.attrs['chain_holds'], f"❌ Нарушены пары {table.attrs['violations']}: {means}"
    assert means['pace'] > means['random']
    assert table.set_index('method').loc['random', 'ratio'] <= 1.5


@pytest.mark.slow
def test_linear_black_box_is_more_robust(preset_report):
    linear = run_experiment(_preset(black_box_family='LINEAR', surrogate_family='LINEAR'))
    assert linear.ratio('pace') < preset_report.ratio('pace')


@pytest.mark.slow
def test_accelerated_is_close_to_basic():
    table = sweep(_preset(use_detector=False), 'algorithm', ['basic', 'accelerated'])
    basic, accelerated = table.to_dict('records')
    assert accelerated['final_objective'] >= 0.9 * basic['final_objective']
    assert basic['total_steps'] >= 3 * accelerated['total_steps']


@pytest.mark.slow
def test_detector_trades_little_effect_for_stealth():
    table = sweep(_preset(epsilon=0.05), 'detector', [False, True])
    off, on = table.to_dict('records')
    assert on['divergence'] <= 0.6 * off['divergence']
    assert on['ratio'] >= 0.7 * off['ratio']


@pytest.mark.slow
def test_speculation_accuracy():
    table = run_speculation_trials(ExperimentConfig(), FAMILIES, trials=20)
    assert table.attrs['accuracy'] >= 0.7
    assert table.attrs['per_family']['LINEAR'] >= 0.9


@pytest.mark.slow
def test_every_incremental_round_is_poisoned():
    reports = run_incremental_scenario(_preset(), parts=5)
    ratios = [r.ratio('pace') for r in reports]
    assert all(value >= 2.0 for value in ratios), f"❌ Отношения по раундам: {ratios}"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
