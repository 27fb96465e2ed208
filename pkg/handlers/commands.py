"""
Обработчики команд CLI лаборатории
"""

import argparse
import logging
import os

import pandas as pd

from config import EXPERIMENT_DEFAULTS
from services.datastore import Database, generate_database, load_preset, load_schema, true_cardinality
from services.detector import score_workload, train_detector
from services.estimators import LabelNormalizer, build_model, evaluate, train
from services.harness import (
    ExperimentConfig,
    compare_methods,
    run_experiment,
    run_incremental_scenario,
    run_speculation_trials,
    sweep,
)
from services.poisongen import (
    GenTrainConfig,
    baseline_attack,
    build_generator,
    generate_poison,
    normalize_trace,
    train_generator_accelerated,
    train_generator_basic,
)
from services.querylang import Query, encode_workload, generate_workload, workload_policy_from_config
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
from services.surrogate import BlackBoxOracle, build_probe_queries, build_speculation_profile, train_surrogate
from utils.error_handler import AttackOrderingError, handle_exceptions
from utils.formatters import (
    format_attack_report,
    format_incremental,
    format_qerror_summary,
    format_speculation,
    format_status,
    format_table,
)

logger = logging.getLogger(__name__)


def load_experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    """Конфигурация из --config; --seed перекрывает все три зерна"""
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_dict()
    if args.seed is not None:
        cfg.seeds = {'data': args.seed, 'model': args.seed + 1, 'attack': args.seed + 2}
    return cfg


def _out(args: argparse.Namespace, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _seed(args: argparse.Namespace, default: int) -> int:
    return default if args.seed is None else args.seed


def _label_fn(db: Database):
    def label_fn(query: Query) -> int:
        return true_cardinality(db, query)
    return label_fn


@handle_exceptions
def data_gen_command(args: argparse.Namespace) -> None:
    """data gen - синтетическая база по пресету или файлу схемы"""
    schema = load_preset(args.schema) if not os.path.exists(args.schema) else load_schema(args.schema)
    db = generate_database(schema, _seed(args, EXPERIMENT_DEFAULTS['seeds']['data']))
    path = _out(args, args.output)
    save_database(db, path)
    print(format_status(True, f"База {db.fingerprint}: {schema.n} таблиц -> {path}"))


@handle_exceptions
def workload_gen_command(args: argparse.Namespace) -> None:
    """workload gen - размеченная случайная нагрузка"""
    db = load_database(args.data)
    workload = generate_workload(db, args.count, workload_policy_from_config(), _seed(args, 0), args.provenance)
    path = _out(args, args.output)
    save_workload(workload, path, db.schema)
    print(format_status(True, f"{len(workload)} запросов ({args.provenance}) -> {path}"))


@handle_exceptions
def ce_train_command(args: argparse.Namespace) -> None:
    """ce train - обучение CE-модели на размеченной нагрузке"""
    db = load_database(args.data)
    workload = load_workload(args.workload, db.schema, 'train')
    seed = _seed(args, EXPERIMENT_DEFAULTS['seeds']['model'])
    model = build_model(args.family, db.schema, seed=seed, normalizer=LabelNormalizer.from_database(db))
    kwargs = {'epochs': args.epochs} if args.epochs else {}
    model = train(model, workload, seed=seed, **kwargs)
    path = _out(args, args.output)
    save_checkpoint(model, path)
    print(format_status(True, f"{args.family}: потеря {model.training_curve[0]:.3f} -> "
                              f"{model.training_curve[-1]:.3f}, модель -> {path}"))


@handle_exceptions
def ce_eval_command(args: argparse.Namespace) -> None:
    """ce eval - Q-error модели на тестовой нагрузке"""
    model = load_checkpoint(args.model)
    db = load_database(args.data)
    report = evaluate(model, load_workload(args.workload, db.schema, 'test'))
    save_report(report.to_dict(with_per_query=True), args.out_dir, 'eval.json')
    print(format_qerror_summary(report.to_dict(), model.family))


@handle_exceptions
def speculate_command(args: argparse.Namespace) -> None:
    """speculate - угадывание семейства чёрного ящика"""
    db = load_database(args.data)
    oracle = BlackBoxOracle.from_model(load_checkpoint(args.black_box), db)
    seed = _seed(args, EXPERIMENT_DEFAULTS['seeds']['attack'])
    probe = build_probe_queries(db, args.probe_size, seed)
    profile = build_speculation_profile(oracle, db, args.candidates, probe, seed)
    save_report(profile.to_dict(), args.out_dir, 'speculation.json')
    print(format_speculation(profile.to_dict()))


@handle_exceptions
def surrogate_train_command(args: argparse.Namespace) -> None:
    """surrogate train - суррогат, подражающий чёрному ящику"""
    db = load_database(args.data)
    oracle = BlackBoxOracle.from_model(load_checkpoint(args.black_box), db)
    seed = _seed(args, EXPERIMENT_DEFAULTS['seeds']['attack'])
    workload = generate_workload(db, args.train_size, seed=seed)
    surrogate = train_surrogate(args.family, oracle, workload, db.schema, args.mode, seed=seed)
    path = _out(args, args.output)
    save_checkpoint(surrogate, path)
    print(format_status(True, f"Суррогат {args.family} ({args.mode}) -> {path}"))


@handle_exceptions
def detector_train_command(args: argparse.Namespace) -> None:
    """detector train - VAE на исторической нагрузке"""
    db = load_database(args.data)
    historical = load_workload(args.workload, db.schema, 'historical')
    detector = train_detector(encode_workload(historical, db.schema), seed=_seed(args, 0), epsilon=args.epsilon)
    path = _out(args, args.output)
    save_checkpoint(detector, path)
    print(format_status(True, f"Детектор: потеря {detector.training_curve[0]:.4f} -> "
                              f"{detector.training_curve[-1]:.4f}, -> {path}"))


@handle_exceptions
def detector_score_command(args: argparse.Namespace) -> None:
    """detector score - ошибки реконструкции и флаги аномальности"""
    detector = load_checkpoint(args.detector)
    db = load_database(args.data)
    workload = load_workload(args.workload, db.schema, args.provenance)
    table = score_workload(detector, encode_workload(workload, db.schema), args.epsilon)
    path = save_table(table, args.out_dir, 'scores.csv')
    print(format_status(True, f"Аномальных запросов: {int(table['abnormal'].sum())}/{len(table)} -> {path}"))


@handle_exceptions
def attack_train_generator_command(args: argparse.Namespace) -> None:
    """attack train-generator - обучение генератора отравляющих запросов"""
    db = load_database(args.data)
    surrogate = load_checkpoint(args.surrogate)
    detector = load_checkpoint(args.detector) if args.detector else None
    if detector is not None and args.epsilon is not None:
        detector.epsilon = args.epsilon
    test = load_workload(args.test, db.schema, 'test')
    overrides = {k: v for k, v in {
        'update_steps': args.update_steps, 'total_steps': args.total_steps, 'repeats': args.repeats,
        'learning_rate': args.lr, 'batch': args.batch,
    }.items() if v is not None}
    cfg = GenTrainConfig.from_config(overrides, train_size=args.train_size)
    seed = _seed(args, EXPERIMENT_DEFAULTS['seeds']['attack'])
    g = build_generator(db.schema, cfg, seed)
    if args.algorithm == 'basic':
        g, trace = train_generator_basic(g, surrogate, _label_fn(db), test, cfg, seed, detector)
    else:
        g, trace = train_generator_accelerated(g, surrogate, detector, _label_fn(db), test, cfg, seed)
    path = _out(args, args.output)
    save_checkpoint(g, path, db.schema)
    table = pd.DataFrame({'step': range(1, len(trace.objective) + 1), 'objective': trace.objective,
                          'normalized': normalize_trace(trace.objective)})
    save_table(table, args.out_dir, 'convergence.csv')
    print(format_status(True, f"Генератор ({trace.algorithm}): {trace.total_steps} шагов, "
                              f"F = {trace.objective[-1]:.3f} -> {path}"))


@handle_exceptions
def attack_sample_command(args: argparse.Namespace) -> None:
    """attack sample - размеченные отравляющие запросы из генератора"""
    db = load_database(args.data)
    g = load_checkpoint(args.generator)
    poison = generate_poison(g, db.schema, args.count, _label_fn(db), _seed(args, 0))
    path = _out(args, args.output)
    save_workload(poison, path, db.schema)
    print(format_status(True, f"{len(poison)} отравляющих запросов -> {path}"))


@handle_exceptions
def attack_baseline_command(args: argparse.Namespace) -> None:
    """attack baseline - отравляющие запросы базовым методом"""
    db = load_database(args.data)
    surrogate = load_checkpoint(args.surrogate)
    poison = baseline_attack(args.method, surrogate, db, args.budget, _seed(args, 0))
    path = _out(args, args.output)
    save_workload(poison, path, db.schema)
    print(format_status(True, f"{args.method}: {len(poison)} запросов -> {path}"))


@handle_exceptions
def experiment_run_command(args: argparse.Namespace) -> None:
    """experiment run - полный эксперимент"""
    cfg = load_experiment_config(args)
    report = run_experiment(cfg, args.out_dir)
    data = report.to_dict()
    save_report(data, args.out_dir)
    save_table(report.to_frame(), args.out_dir, 'methods.csv')
    if report.traces:
        objective = report.traces['objective']
        save_table(pd.DataFrame({'step': range(1, len(objective) + 1), 'objective': objective,
                                 'normalized': normalize_trace(objective)}), args.out_dir, 'convergence.csv')
    print(format_attack_report(data))


@handle_exceptions
def experiment_compare_command(args: argparse.Namespace) -> None:
    """experiment compare - сравнение методов атаки"""
    cfg = load_experiment_config(args)
    table = compare_methods(cfg, args.methods, args.out_dir)
    report = table.attrs.pop('report')
    save_report(report.to_dict(), args.out_dir)
    save_table(table, args.out_dir, 'methods.csv')
    print(format_attack_report(report.to_dict()))
    print(format_status(table.attrs['ordering_holds'], "pace сильнее всех базовых методов"))
    print(format_status(table.attrs['chain_holds'], "порядок pace ≥ lb_g ≥ greedy ≥ lb_s ≥ random"))
    if args.strict and not (table.attrs['ordering_holds'] and table.attrs['chain_holds']):
        raise AttackOrderingError(f"Нарушен порядок методов атаки: {table.attrs['violations']}",
                                  table.attrs['violations'])


@handle_exceptions
def experiment_incremental_command(args: argparse.Namespace) -> None:
    """experiment incremental - инкрементальное обучение и атаки"""
    cfg = load_experiment_config(args)
    reports = [r.to_dict() for r in run_incremental_scenario(cfg, args.parts, args.out_dir)]
    save_report({'rounds': reports}, args.out_dir, 'incremental.json')
    rows = [{'round': i, 'clean_mean': r['clean']['mean'], 'poisoned_mean': r['methods']['pace']['mean'],
             'ratio': r['methods']['pace']['ratio']} for i, r in enumerate(reports, start=1)]
    save_table(pd.DataFrame(rows), args.out_dir, 'incremental.csv')
    print(format_incremental(reports))


def _parse_value(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    if raw.lower() in ('true', 'false', 'on', 'off'):
        return raw.lower() in ('true', 'on')
    return raw


@handle_exceptions
def experiment_sweep_command(args: argparse.Namespace) -> None:
    """experiment sweep - развёртка одного параметра"""
    cfg = load_experiment_config(args)
    values = [_parse_value(v) for v in args.values]
    table = sweep(cfg, args.parameter, values, args.out_dir)
    path = save_table(table, args.out_dir, f"sweep_{args.parameter}.csv")
    print(format_table(table, f"Развёртка {args.parameter} -> {path}",
                       ['value', 'clean_mean', 'poisoned_mean', 'ratio', 'divergence',
                        'effectiveness_per_divergence']))


@handle_exceptions
def experiment_speculation_command(args: argparse.Namespace) -> None:
    """experiment speculation - точность угадывания по семействам"""
    cfg = load_experiment_config(args)
    table = run_speculation_trials(cfg, args.families, args.trials)
    accuracy, per_family = table.attrs.pop('accuracy'), table.attrs.pop('per_family')
    save_table(table, args.out_dir, 'speculation.csv')
    save_report({'accuracy': accuracy, 'per_family': per_family}, args.out_dir, 'speculation.json')
    print(format_table(table, f"Точность угадывания: {accuracy:.0%}"))

