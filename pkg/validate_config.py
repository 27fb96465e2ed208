#!/usr/bin/env python3
"""
Валидация конфигурации лаборатории
Проверяет переменные окружения и файлы конфигурации экспериментов
"""

import os
import sys
from typing import List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from config import EXIT_CODES
from services.harness import ExperimentConfig
from utils.error_handler import ConfigurationError

load_dotenv()

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')
BOOLEAN_VALUES = ('true', 'false')


def check_env_vars() -> List[Tuple[str, str, bool, str]]:
    """
    Проверка переменных окружения

    Returns:
        Список кортежей (переменная, описание, валидна, сообщение)
    """
    results = []

    level = os.getenv('LOG_LEVEL', 'INFO')
    results.append(('LOG_LEVEL', 'Уровень логирования', level.upper() in LOG_LEVELS,
                    level if level.upper() in LOG_LEVELS else f"ожидается одно из {LOG_LEVELS}"))

    for name, description in [('DEBUG_MODE', 'Режим отладки'),
                              ('SHOW_PROGRESS', 'Прогресс-бары обучения'),
                              ('RUN_SLOW_TESTS', 'Долгие приёмочные тесты')]:
        value = os.getenv(name, 'false').lower()
        ok = value in BOOLEAN_VALUES
        results.append((name, description, ok, value if ok else "ожидается true или false"))

    for name, description, default, minimum in [('DEFAULT_SEED', 'Зерно по умолчанию', '7', 0),
                                                ('TORCH_THREADS', 'Потоки torch', '1', 1)]:
        ok, message = validate_int(os.getenv(name, default), minimum)
        results.append((name, description, ok, message))

    out_dir = os.getenv('DEFAULT_OUT_DIR', 'runs')
    results.append(('DEFAULT_OUT_DIR', 'Каталог результатов', bool(out_dir.strip()), out_dir or 'пусто'))
    return results


def validate_int(raw: str, minimum: int) -> Tuple[bool, str]:
    """
    Валидация целого значения

    Args:
        raw: Строковое значение
        minimum: Минимально допустимое значение

    Returns:
        Кортеж (валидный, сообщение)
    """
    try:
        value = int(raw)
    except (TypeError, ValueError):
        return False, f"не целое число: {raw}"
    if value < minimum:
        return False, f"должно быть >= {minimum}: {value}"
    return True, str(value)


def validate_experiment_file(path: str) -> List[str]:
    """
    Проверка файла конфигурации эксперимента

    Returns:
        Список проблем (пустой, если файл корректен)
    """
    try:
        cfg = ExperimentConfig.from_file(path)
        cfg.load_schema()
    except ConfigurationError as e:
        return [str(e)]
    problems = []
    if cfg.budget > cfg.train_size:
        problems.append(f"Бюджет отравления {cfg.budget} больше обучающей нагрузки {cfg.train_size}")
    return problems


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Основная функция валидации: переменные окружения и переданные файлы экспериментов"""
    paths = list(sys.argv[1:] if argv is None else argv)
    print("🔍 Проверка конфигурации лаборатории")
    print("=" * 60)

    all_valid = True
    print("\n📋 Переменные окружения:")
    for name, description, ok, message in check_env_vars():
        status = "✅" if ok else "❌"
        print(f"  {status} {name}: {description} ({message})")
        all_valid = all_valid and ok

    if paths:
        print("\n🔧 Файлы экспериментов:")
    for path in paths:
        problems = validate_experiment_file(path)
        status = "✅" if not problems else "❌"
        print(f"  {status} {path}")
        for problem in problems:
            print(f"      - {problem}")
        all_valid = all_valid and not problems

    print("\n" + "=" * 60)
    if all_valid:
        print("🎉 Конфигурация валидна")
        return EXIT_CODES['success']
    print("❌ Обнаружены ошибки в конфигурации")
    return EXIT_CODES['config_error']


if __name__ == "__main__":
    sys.exit(main())
