#!/usr/bin/env python3
"""
Лаборатория атак отравления на обучаемые оценщики кардинальности
Основной файл запуска: разбор аргументов и вызов обработчиков
"""

import argparse
import logging
import sys
from typing import List, Optional

import torch

from config import (
    DEBUG_MODE,
    DEFAULT_OUT_DIR,
    DEFAULT_SEED,
    EXIT_CODES,
    FAMILIES,
    LOG_FILE,
    LOG_LEVEL,
    TORCH_THREADS,
)
from handlers.commands import (
    attack_baseline_command,
    attack_sample_command,
    attack_train_generator_command,
    ce_eval_command,
    ce_train_command,
    data_gen_command,
    detector_score_command,
    detector_train_command,
    experiment_compare_command,
    experiment_incremental_command,
    experiment_run_command,
    experiment_speculation_command,
    experiment_sweep_command,
    speculate_command,
    surrogate_train_command,
    workload_gen_command,
)
from services.harness import METHODS, SWEEP_PARAMETERS
from services.poisongen import ALGORITHMS, BASELINES
from services.querylang import PROVENANCES
from services.surrogate import SURROGATE_MODES

# Настройка логирования
log_level = logging.DEBUG if DEBUG_MODE else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=log_level,
    handlers=[
        logging.FileHandler(LOG_FILE),
        logging.StreamHandler()
    ]
)
logger = logging.getLogger(__name__)

if DEBUG_MODE:
    logger.debug("Debug mode enabled")


def _group(subparsers, name: str, help_text: str):
    parser = subparsers.add_parser(name, help=help_text)
    return parser.add_subparsers(dest='action', metavar='action')


def build_parser() -> argparse.ArgumentParser:
    """Дерево подкоманд: data, workload, ce, speculate, surrogate, detector, attack, experiment"""
    parser = argparse.ArgumentParser(prog='lab', description='Атаки отравления на обучаемые оценщики кардинальности')
    parser.add_argument('--config', help='JSON-файл конфигурации эксперимента')
    parser.add_argument('--seed', type=int, default=None, help=f'Зерно (по умолчанию из конфигурации, {DEFAULT_SEED})')
    parser.add_argument('--out-dir', dest='out_dir', default=DEFAULT_OUT_DIR, help='Каталог результатов')
    commands = parser.add_subparsers(dest='command', metavar='command')

    data = _group(commands, 'data', 'Синтетическая база данных')
    p = data.add_parser('gen', help='Сгенерировать базу')
    p.add_argument('--schema', default='single-table', help='Пресет или путь к файлу схемы')
    p.add_argument('--output', default='data.npz')
    p.set_defaults(handler=data_gen_command)

    workload = _group(commands, 'workload', 'Нагрузки')
    p = workload.add_parser('gen', help='Сгенерировать размеченную нагрузку')
    p.add_argument('--data', required=True)
    p.add_argument('--count', type=int, required=True)
    p.add_argument('--provenance', choices=PROVENANCES, default='train')
    p.add_argument('--output', default='workload.jsonl')
    p.set_defaults(handler=workload_gen_command)

    ce = _group(commands, 'ce', 'CE-модели')
    p = ce.add_parser('train', help='Обучить модель')
    p.add_argument('--family', choices=FAMILIES, default='FCN')
    p.add_argument('--data', required=True)
    p.add_argument('--workload', required=True)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--output', default='model.pt')
    p.set_defaults(handler=ce_train_command)
    p = ce.add_parser('eval', help='Оценить модель')
    p.add_argument('--model', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--workload', required=True)
    p.set_defaults(handler=ce_eval_command)

    p = commands.add_parser('speculate', help='Угадать семейство чёрного ящика')
    p.add_argument('--black-box', dest='black_box', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--probe-size', dest='probe_size', type=int, default=60)
    p.add_argument('--candidates', nargs='+', choices=FAMILIES, default=None)
    p.set_defaults(handler=speculate_command)

    surrogate = _group(commands, 'surrogate', 'Суррогатные модели')
    p = surrogate.add_parser('train', help='Обучить суррогат')
    p.add_argument('--black-box', dest='black_box', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--family', choices=FAMILIES, required=True)
    p.add_argument('--mode', choices=SURROGATE_MODES, default='dual')
    p.add_argument('--train-size', dest='train_size', type=int, default=2000)
    p.add_argument('--output', default='surrogate.pt')
    p.set_defaults(handler=surrogate_train_command)

    detector = _group(commands, 'detector', 'Детектор аномалий')
    p = detector.add_parser('train', help='Обучить детектор')
    p.add_argument('--data', required=True)
    p.add_argument('--workload', required=True, help='Историческая нагрузка')
    p.add_argument('--epsilon', type=float, default=0.05)
    p.add_argument('--output', default='detector.pt')
    p.set_defaults(handler=detector_train_command)
    p = detector.add_parser('score', help='Оценить нагрузку детектором')
    p.add_argument('--detector', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--workload', required=True)
    p.add_argument('--provenance', choices=PROVENANCES, default='poison')
    p.add_argument('--epsilon', type=float, default=None)
    p.set_defaults(handler=detector_score_command)

    attack = _group(commands, 'attack', 'Атака')
    p = attack.add_parser('train-generator', help='Обучить генератор')
    p.add_argument('--data', required=True)
    p.add_argument('--surrogate', required=True)
    p.add_argument('--detector', default=None, help='Без флага детектор выключен')
    p.add_argument('--test', required=True, help='Тестовая нагрузка атакующего')
    p.add_argument('--algorithm', choices=ALGORITHMS, default='accelerated')
    p.add_argument('--epsilon', type=float, default=None)
    p.add_argument('--K', dest='update_steps', type=int, default=None)
    p.add_argument('--M', dest='total_steps', type=int, default=None)
    p.add_argument('--repeats', type=int, default=None)
    p.add_argument('--lr', type=float, default=None)
    p.add_argument('--batch', type=int, default=None)
    p.add_argument('--train-size', dest='train_size', type=int, default=5000)
    p.add_argument('--output', default='generator.pt')
    p.set_defaults(handler=attack_train_generator_command)
    p = attack.add_parser('sample', help='Выборка отравляющих запросов')
    p.add_argument('--data', required=True)
    p.add_argument('--generator', required=True)
    p.add_argument('--count', type=int, required=True)
    p.add_argument('--output', default='poison.jsonl')
    p.set_defaults(handler=attack_sample_command)
    p = attack.add_parser('baseline', help='Базовый метод атаки')
    p.add_argument('--method', choices=BASELINES, required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--surrogate', required=True)
    p.add_argument('--budget', type=int, required=True)
    p.add_argument('--output', default='poison.jsonl')
    p.set_defaults(handler=attack_baseline_command)

    experiment = _group(commands, 'experiment', 'Эксперименты')
    p = experiment.add_parser('run', help='Полный эксперимент')
    p.set_defaults(handler=experiment_run_command)
    p = experiment.add_parser('compare', help='Сравнение методов')
    p.add_argument('--methods', nargs='+', choices=METHODS, default=None)
    p.add_argument('--strict', action='store_true', help='Код 3 при нарушении порядка методов')
    p.set_defaults(handler=experiment_compare_command)
    p = experiment.add_parser('incremental', help='Инкрементальный сценарий')
    p.add_argument('--parts', type=int, default=5)
    p.set_defaults(handler=experiment_incremental_command)
    p = experiment.add_parser('sweep', help='Развёртка параметра')
    p.add_argument('--parameter', choices=SWEEP_PARAMETERS, required=True)
    p.add_argument('--values', nargs='+', required=True)
    p.set_defaults(handler=experiment_sweep_command)
    p = experiment.add_parser('speculation', help='Точность угадывания по семействам')
    p.add_argument('--families', nargs='+', choices=FAMILIES, default=None)
    p.add_argument('--trials', type=int, default=20)
    p.set_defaults(handler=experiment_speculation_command)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Точка входа: возвращает код выхода"""
    torch.set_num_threads(TORCH_THREADS)
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = getattr(args, 'handler', None)
    if handler is None:
        parser.print_help()
        return EXIT_CODES['config_error']
    logger.info(f"Команда: {args.command} {getattr(args, 'action', '') or ''}".strip())
    return handler(args)


if __name__ == '__main__':
    sys.exit(main())
