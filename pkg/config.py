"""
Конфигурация лаборатории атак отравления на обучаемые оценщики кардинальности
"""

import os
from typing import Dict, Any
from dotenv import load_dotenv

# Загружаем переменные окружения из .env файла
load_dotenv()

# Логирование
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
DEBUG_MODE = os.getenv('DEBUG_MODE', 'false').lower() == 'true'
LOG_FILE = os.getenv('LOG_FILE', 'lab.log')

# Общие настройки запуска
DEFAULT_SEED = int(os.getenv('DEFAULT_SEED', '7'))
DEFAULT_OUT_DIR = os.getenv('DEFAULT_OUT_DIR', 'runs')
TORCH_THREADS = int(os.getenv('TORCH_THREADS', '1'))
SHOW_PROGRESS = os.getenv('SHOW_PROGRESS', 'false').lower() == 'true'

# Долгие приёмочные тесты запускаются только по явному флагу
RUN_SLOW_TESTS = os.getenv('RUN_SLOW_TESTS', 'false').lower() == 'true'

# Версии форматов файлов
DATABASE_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

# Семейства CE-моделей; порядок задаёт индекс семейства (для разрешения ничьих)
FAMILIES = ('FCN', 'FCN_POOL', 'MSCN', 'RNN', 'LSTM', 'LINEAR')

# Гиперпараметры моделей по умолчанию.
# heads = (число компонент, число параллельных голов в компоненте)
MODEL_HYPERPARAMS: Dict[str, Dict[str, Any]] = {
    'FCN': {'heads': (1, 1), 'layers': 4, 'hidden_dims': (64, 128), 'out_dim': 1},
    'FCN_POOL': {'heads': (1, 3), 'layers': 4, 'hidden_dims': (64, 128), 'out_dim': 1},
    'MSCN': {'heads': (3, 3), 'layers': 4, 'hidden_dims': (64, 128), 'out_dim': 1},
    'RNN': {'heads': (1, 1), 'layers': 4, 'hidden_dims': (64,), 'out_dim': 1},
    'LSTM': {'heads': (1, 1), 'layers': 4, 'hidden_dims': (64,), 'out_dim': 1},
    'LINEAR': {'heads': (1, 1), 'layers': 2, 'hidden_dims': (128,), 'out_dim': 1},
}

# Обучение CE-модели (ERM). Размер батча и эпохи не заданы исходной постановкой
TRAIN_CONFIG = {
    'lr': 1e-3,
    'epochs': 60,
    'batch_size': 128,
    'patience': 8,        # ранняя остановка при плато
    'min_delta': 1e-3,    # минимальное относительное улучшение
}

# Инкрементальное обновление жертвы на новых запросах
UPDATE_POLICY_CONFIG = {
    'learning_rate': 5e-3,
    'steps': 10,
}

# Генерация рабочей нагрузки
WORKLOAD_POLICY_CONFIG = {
    'predicates_min': 1,
    'predicates_max': None,   # None = все атрибуты шаблона соединения
    'width_min': 0.01,
    'width_max': 1.0,
    'rejection_cap': 0.99,
}

# Угадывание типа чёрного ящика
SPECULATION_CONFIG = {
    'candidates': FAMILIES,
    'probe_size': 60,
    'candidate_train_size': 2000,
    'candidate_epochs': 30,
    'latency_repeats': 5,
    'narrow_width': 0.05,
    'wide_width': 0.8,
}

# Обучение суррогатной модели
SURROGATE_CONFIG = {
    'mode': 'dual',
    'lr': 1e-3,
    'epochs': 40,
    'batch_size': 128,
    'train_size': 2000,
}

# Детектор аномалий (VAE, 7 слоёв)
DETECTOR_CONFIG = {
    'epsilon': 0.05,
    'beta': 1e-3,
    'epochs': 60,
    'lr': 1e-3,
    'batch_size': 128,
    'latent_dim': None,            # None = ceil((n + 2m) / 2)
    'hidden_dims': (128, 64, 32),
}

# Генератор отравляющих запросов
GENERATOR_CONFIG = {
    'learning_rate': 5e-3,    # eta
    'alpha': 5e-3,            # шаг внутреннего обновления суррогата
    'total_steps': 20,        # M
    'update_steps': 10,       # K
    'batch_fraction': 0.05,   # |X_p| как доля обучающей нагрузки
    'batch': None,            # явный размер батча перекрывает долю
    'repeats': 20,            # n_r для базового алгоритма
    'noise_dim': 16,
    'hidden_dim': 64,
    'layers': (4, 5, 5),      # G_j, G_l, G_r
    'max_retries': 100,
    'grad_norm_floor': 1e-6,
    'step_multiplier': 10.0,
    'inner_clip': 1.0,
    'first_order': False,
}

# Базовые методы атаки
BASELINE_CONFIG = {
    'lb_s_pool_factor': 10,
    'greedy_candidates': 10,  # диапазонов на атрибут
    'greedy_passes': 3,       # проходов покоординатного подъёма
}

# Синтетические схемы: одна таблица (DMV-подобная) и звезда из четырёх таблиц
SCHEMA_PRESETS: Dict[str, Dict[str, Any]] = {
    'single-table': {
        'tables': [
            {
                'name': 'vehicles',
                'row_count': 10000,
                'attributes': [
                    {'name': 'model_year', 'domain': [1980, 2024], 'integer': True,
                     'distribution': {'kind': 'gaussian', 'mu': 2010, 'sigma': 7}},
                    {'name': 'unladen_weight', 'domain': [1000, 8000],
                     'distribution': {'kind': 'gaussian', 'mu': 3500, 'sigma': 900}},
                    {'name': 'county', 'domain': [1, 62], 'integer': True,
                     'distribution': {'kind': 'zipf', 's': 1.6}},
                    {'name': 'cylinders', 'domain': [2, 12], 'integer': True,
                     'distribution': {'kind': 'uniform'}},
                ],
                'key_attributes': [],
            },
        ],
        'join_edges': [],
    },
    'multi-table': {
        'tables': [
            {
                'name': 'title',
                'row_count': 2000,
                'attributes': [
                    {'name': 'id', 'domain': [1, 2000], 'integer': True,
                     'distribution': {'kind': 'uniform'}},
                    {'name': 'production_year', 'domain': [1900, 2024], 'integer': True,
                     'distribution': {'kind': 'gaussian', 'mu': 1995, 'sigma': 18}},
                    {'name': 'kind_id', 'domain': [1, 7], 'integer': True,
                     'distribution': {'kind': 'zipf', 's': 2.0}},
                ],
                'key_attributes': ['id'],
            },
            {
                'name': 'movie_info',
                'row_count': 5000,
                'attributes': [
                    {'name': 'movie_id', 'domain': [1, 2000], 'integer': True,
                     'distribution': {'kind': 'zipf', 's': 1.3}},
                    {'name': 'info_type_id', 'domain': [1, 110], 'integer': True,
                     'distribution': {'kind': 'zipf', 's': 1.5}},
                    {'name': 'note_len', 'domain': [0, 500],
                     'distribution': {'kind': 'gaussian', 'mu': 120, 'sigma': 60}},
                ],
                'key_attributes': ['movie_id'],
            },
            {
                'name': 'cast_info',
                'row_count': 8000,
                'attributes': [
                    {'name': 'movie_id', 'domain': [1, 2000], 'integer': True,
                     'distribution': {'kind': 'zipf', 's': 1.2}},
                    {'name': 'role_id', 'domain': [1, 12], 'integer': True,
                     'distribution': {'kind': 'uniform'}},
                    {'name': 'nr_order', 'domain': [1, 100], 'integer': True,
                     'distribution': {'kind': 'zipf', 's': 1.4}},
                ],
                'key_attributes': ['movie_id'],
            },
            {
                'name': 'movie_keyword',
                'row_count': 4000,
                'attributes': [
                    {'name': 'movie_id', 'domain': [1, 2000], 'integer': True,
                     'distribution': {'kind': 'uniform'}},
                    {'name': 'keyword_id', 'domain': [1, 5000], 'integer': True,
                     'distribution': {'kind': 'zipf', 's': 1.2}},
                    {'name': 'weight', 'domain': [0, 1],
                     'distribution': {'kind': 'uniform'}},
                ],
                'key_attributes': ['movie_id'],
            },
        ],
        'join_edges': [
            [0, 'id', 1, 'movie_id'],
            [0, 'id', 2, 'movie_id'],
            [0, 'id', 3, 'movie_id'],
        ],
    },
}

# Параметры эксперимента по умолчанию (настольный масштаб: 0.5x от 10000/1000)
EXPERIMENT_DEFAULTS: Dict[str, Any] = {
    'schema': 'single-table',
    'train_size': 5000,
    'test_size': 500,
    'historical_size': 5000,
    'probe_size': SPECULATION_CONFIG['probe_size'],
    'black_box_family': 'FCN',
    'black_box_hyperparams': None,
    'surrogate_family': None,          # None = угадывать по чёрному ящику
    'surrogate_mode': SURROGATE_CONFIG['mode'],
    'algorithm': 'accelerated',
    'use_detector': True,
    'epsilon': DETECTOR_CONFIG['epsilon'],
    'poison_fraction': GENERATOR_CONFIG['batch_fraction'],
    'poison_budget': None,             # None = poison_fraction * train_size
    'generator': {},                   # перекрытия GENERATOR_CONFIG
    'train': {},                       # перекрытия TRAIN_CONFIG для чёрного ящика
    'surrogate': {},                   # перекрытия SURROGATE_CONFIG
    'detector': {},                    # перекрытия DETECTOR_CONFIG (кроме epsilon)
    'speculation': {},                 # перекрытия SPECULATION_CONFIG
    'update_policy': {},               # перекрытия UPDATE_POLICY_CONFIG
    'workload_policy': {},             # перекрытия WORKLOAD_POLICY_CONFIG
    'methods': ['pace', 'lb_g', 'greedy', 'lb_s', 'random'],
    'seeds': {'data': 7, 'model': 11, 'attack': 23},
}

# Коды возврата CLI
EXIT_CODES = {
    'success': 0,
    'config_error': 2,
    'stage_failure': 3,
}

# Emoji для сводок в консоли
EMOJI = {
    'report': '📊',
    'chart_up': '📈',
    'chart_down': '📉',
    'warning': '⚠️',
    'success': '✅',
    'error': '❌',
    'info': 'ℹ️',
    'clock': '🕐',
    'rocket': '🚀',
    'target': '🎯',
}
