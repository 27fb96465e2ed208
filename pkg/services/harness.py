"""
Оркестрация экспериментов: чистое обучение, угадывание типа, суррогат,
детектор, генератор, отравление и оценка; сравнения, инкрементальный
сценарий и развёртки параметров
"""

import copy
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import (
    DETECTOR_CONFIG,
    EXPERIMENT_DEFAULTS,
    FAMILIES,
    SCHEMA_PRESETS,
    SPECULATION_CONFIG,
    SURROGATE_CONFIG,
    TRAIN_CONFIG,
    UPDATE_POLICY_CONFIG,
)
from services.datastore import Database, Schema, generate_database, load_preset, load_schema
from services.detector import Detector, train_detector
from services.estimators import (
    CEModel,
    LabelNormalizer,
    QErrorReport,
    UpdatePolicy,
    build_model,
    evaluate,
    incremental_update,
    train,
)
from services.poisongen import (
    ALGORITHMS,
    BASELINES,
    GenTrainConfig,
    GeneratorTriple,
    TrainingTrace,
    baseline_attack,
    build_generator,
    generate_poison,
    train_generator_accelerated,
    train_generator_basic,
    train_lb_generator,
)
from services.querylang import (
    Workload,
    encode_workload,
    generate_workload,
    js_divergence,
    workload_policy_from_config,
)
from services.surrogate import (
    SURROGATE_MODES,
    BlackBoxOracle,
    SpeculationProfile,
    build_probe_queries,
    build_speculation_profile,
    train_surrogate,
)
from utils.calculations import ratio
from utils.error_handler import AttackOrderingError, ConfigurationError, RunMetrics, StageError, stage

logger = logging.getLogger(__name__)

METHODS = ('pace',) + BASELINES
SWEEP_PARAMETERS = ('poison_budget', 'epsilon', 'surrogate_family', 'layers', 'hidden_scale',
                    'surrogate_mode', 'algorithm', 'detector')
TRAINING_STAGES = ('speculation', 'surrogate', 'detector')
GENERATION_PREFIX = 'generator'
# Ожидаемый порядок силы атак (нестрогий), от сильной к слабой
METHOD_CHAIN = ('pace', 'lb_g', 'greedy', 'lb_s', 'random')
SEED_KEYS = ('data', 'model', 'attack')

# Этапы, которые не зависят от параметра развёртки и переиспользуются между ячейками
_SHARED_STAGES = ('data', 'workloads', 'black_box', 'clean', 'detector', 'speculation', 'surrogate')
_SWEEP_INVALIDATES = {
    'poison_budget': (),
    'epsilon': (),
    'surrogate_family': ('speculation', 'surrogate'),
    'surrogate_mode': ('surrogate',),
    'algorithm': (),
    'detector': (),
    'layers': ('black_box', 'clean', 'speculation', 'surrogate'),
    'hidden_scale': ('black_box', 'clean', 'speculation', 'surrogate'),
}


def derive_seed(base: int, *keys: int) -> int:
    """Независимое производное зерно для подэтапа"""
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    """Параметры эксперимента; отсутствующие ключи берутся из EXPERIMENT_DEFAULTS"""
    schema: Any = EXPERIMENT_DEFAULTS['schema']
    train_size: int = EXPERIMENT_DEFAULTS['train_size']
    test_size: int = EXPERIMENT_DEFAULTS['test_size']
    historical_size: int = EXPERIMENT_DEFAULTS['historical_size']
    probe_size: int = EXPERIMENT_DEFAULTS['probe_size']
    black_box_family: str = EXPERIMENT_DEFAULTS['black_box_family']
    black_box_hyperparams: Optional[Dict[str, Any]] = None
    surrogate_family: Optional[str] = None
    surrogate_mode: str = EXPERIMENT_DEFAULTS['surrogate_mode']
    algorithm: str = EXPERIMENT_DEFAULTS['algorithm']
    use_detector: bool = EXPERIMENT_DEFAULTS['use_detector']
    epsilon: float = EXPERIMENT_DEFAULTS['epsilon']
    poison_fraction: float = EXPERIMENT_DEFAULTS['poison_fraction']
    poison_budget: Optional[int] = None
    generator: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    surrogate: Dict[str, Any] = field(default_factory=dict)
    detector: Dict[str, Any] = field(default_factory=dict)
    speculation: Dict[str, Any] = field(default_factory=dict)
    update_policy: Dict[str, Any] = field(default_factory=dict)
    workload_policy: Dict[str, Any] = field(default_factory=dict)
    methods: List[str] = field(default_factory=lambda: list(EXPERIMENT_DEFAULTS['methods']))
    seeds: Dict[str, int] = field(default_factory=lambda: dict(EXPERIMENT_DEFAULTS['seeds']))

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]] = None) -> 'ExperimentConfig':
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"Неизвестные ключи конфигурации эксперимента: {sorted(unknown)}")
        params = copy.deepcopy(EXPERIMENT_DEFAULTS)
        params.update(copy.deepcopy(data))
        if 'seeds' in data:
            params['seeds'] = {**EXPERIMENT_DEFAULTS['seeds'], **data['seeds']}
        return cls(**params)

    @classmethod
    def from_file(cls, path: str) -> 'ExperimentConfig':
        if not os.path.exists(path):
            raise ConfigurationError(f"Файл конфигурации не найден: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Некорректный JSON в {path}: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> None:
        if isinstance(self.schema, str) and self.schema not in SCHEMA_PRESETS and not os.path.exists(self.schema):
            raise ConfigurationError(f"Схема не найдена ни среди пресетов, ни как файл: {self.schema}")
        for name in ('train_size', 'test_size', 'historical_size', 'probe_size'):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} должен быть >= 1")
        if self.black_box_family not in FAMILIES:
            raise ConfigurationError(f"Неизвестное семейство чёрного ящика: {self.black_box_family}")
        if self.surrogate_family is not None and self.surrogate_family not in FAMILIES:
            raise ConfigurationError(f"Неизвестное семейство суррогата: {self.surrogate_family}")
        if self.surrogate_mode not in SURROGATE_MODES:
            raise ConfigurationError(f"Неизвестный режим суррогата: {self.surrogate_mode}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"Неизвестный алгоритм генератора: {self.algorithm}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon должен быть >= 0: {self.epsilon}")
        if not 0 < self.poison_fraction <= 1:
            raise ConfigurationError(f"poison_fraction должен быть в (0, 1]: {self.poison_fraction}")
        if self.poison_budget is not None and self.poison_budget < 1:
            raise ConfigurationError(f"poison_budget должен быть >= 1: {self.poison_budget}")
        unknown_methods = [m for m in self.methods if m not in METHODS]
        if unknown_methods:
            raise ConfigurationError(f"Неизвестные методы атаки: {unknown_methods}. Доступны: {list(METHODS)}")
        missing = [k for k in SEED_KEYS if k not in self.seeds]
        if missing:
            raise ConfigurationError(f"Не заданы зёрна: {missing}")

    @property
    def budget(self) -> int:
        if self.poison_budget is not None:
            return int(self.poison_budget)
        return max(1, int(round(self.poison_fraction * self.train_size)))

    def load_schema(self) -> Schema:
        if isinstance(self.schema, Mapping):
            return Schema.from_dict(self.schema)
        if self.schema in SCHEMA_PRESETS:
            return load_preset(self.schema)
        return load_schema(self.schema)


@dataclass
class AttackReport:
    """Результаты одного эксперимента: чистая и отравленные ошибки, расхождения, накладные расходы"""
    config: Dict[str, Any]
    seeds: Dict[str, int]
    database: str
    budget: int
    black_box_family: str
    surrogate_family: str
    clean: QErrorReport
    poisoned: Dict[str, QErrorReport] = field(default_factory=dict)
    divergence: Dict[str, float] = field(default_factory=dict)
    poison_counts: Dict[str, int] = field(default_factory=dict)
    counters: Dict[str, Any] = field(default_factory=dict)
    traces: Dict[str, List[float]] = field(default_factory=dict)
    overhead: Dict[str, float] = field(default_factory=dict)
    speculation: Optional[Dict[str, Any]] = None

    def ratio(self, method: str) -> float:
        return ratio(self.poisoned[method].mean, self.clean.mean)

    def to_dict(self, include_timing: bool = True) -> Dict[str, Any]:
        data = {
            'config': self.config,
            'seeds': dict(self.seeds),
            'database': self.database,
            'budget': self.budget,
            'black_box_family': self.black_box_family,
            'surrogate_family': self.surrogate_family,
            'clean': self.clean.to_dict(),
            'methods': {
                method: {
                    **report.to_dict(),
                    'ratio': self.ratio(method),
                    'divergence': self.divergence.get(method),
                    'poison_count': self.poison_counts.get(method),
                }
                for method, report in self.poisoned.items()
            },
            'counters': self.counters,
            'traces': self.traces,
        }
        if include_timing:
            data['overhead'] = dict(self.overhead)
            data['speculation'] = self.speculation
        elif self.speculation is not None:
            # косинусы зависят от замеров задержки
            data['speculation'] = {'chosen': self.speculation.get('chosen')}
        return data

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for method, report in self.poisoned.items():
            rows.append({
                'method': method,
                **report.to_dict(),
                'ratio': self.ratio(method),
                'divergence': self.divergence.get(method),
                'poison_count': self.poison_counts.get(method),
            })
        return pd.DataFrame(rows, columns=['method', 'mean', 'p50', 'p90', 'p95', 'p99', 'max',
                                           'ratio', 'divergence', 'poison_count'])


class Experiment:
    """
    Конвейер эксперимента с кэшированием этапов

    Каждый этап вычисляется один раз, выполняется внутри stage() и
    записывает длительность в RunMetrics. Чёрный ящик после обучения
    доступен атакующей стороне только через BlackBoxOracle.
    """

    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[str] = None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.metrics = RunMetrics()
        self._cache: Dict[str, Tuple[Any, float]] = {}

    def fork(self, cfg: ExperimentConfig, keep: Sequence[str] = _SHARED_STAGES,
             black_box: Optional[CEModel] = None) -> 'Experiment':
        """
        Новый эксперимент с переиспользованием уже посчитанных этапов.
        Унаследованные этапы учитываются с нулевой длительностью: их время уже
        отнесено к эксперименту, который их посчитал.
        """
        other = Experiment(cfg, self.out_dir)
        for key in keep:
            if key in self._cache:
                other._cache[key] = (self._cache[key][0], 0.0)
        if black_box is not None:
            for key in ('black_box', 'clean', 'speculation', 'surrogate'):
                other._cache.pop(key, None)
            other._cache['black_box'] = (black_box, 0.0)
        return other

    def _cached(self, key: str, builder: Callable[[], Any]) -> Any:
        if key not in self._cache:
            started = time.perf_counter()
            with stage(key, self.metrics):
                value = builder()
            self._cache[key] = (value, time.perf_counter() - started)
        return self._cache[key][0]

    def stage_seconds(self, key: str) -> float:
        return self._cache[key][1] if key in self._cache else 0.0

    @property
    def seeds(self) -> Dict[str, int]:
        return self.cfg.seeds

    def data(self) -> Database:
        return self._cached('data', lambda: generate_database(self.cfg.load_schema(), self.seeds['data']))

    def workloads(self) -> Dict[str, Workload]:
        """Нагрузки жертвы: обучающая, тестовая и историческая; непересекающиеся зёрна"""
        db = self.data()

        def build() -> Dict[str, Workload]:
            policy = workload_policy_from_config(self.cfg.workload_policy)
            seed = self.seeds['data']
            return {
                'train': generate_workload(db, self.cfg.train_size, policy, derive_seed(seed, 1), 'train'),
                'test': generate_workload(db, self.cfg.test_size, policy, derive_seed(seed, 2), 'test'),
                'historical': generate_workload(db, self.cfg.historical_size, policy, derive_seed(seed, 3),
                                                'historical'),
            }
        return self._cached('workloads', build)

    def black_box(self) -> CEModel:
        db, workloads = self.data(), self.workloads()

        def build() -> CEModel:
            model = build_model(self.cfg.black_box_family, db.schema, self.cfg.black_box_hyperparams,
                                seed=self.seeds['model'], normalizer=LabelNormalizer.from_database(db))
            params = {**TRAIN_CONFIG, **self.cfg.train}
            return train(model, workloads['train'], lr=params['lr'], epochs=params['epochs'],
                         batch_size=params['batch_size'], seed=self.seeds['model'], patience=params['patience'])
        return self._cached('black_box', build)

    def oracle(self) -> BlackBoxOracle:
        return BlackBoxOracle.from_model(self.black_box(), self.data())

    def clean(self) -> QErrorReport:
        model, test = self.black_box(), self.workloads()['test']
        return self._cached('clean', lambda: evaluate(model, test))

    def update_policy(self) -> UpdatePolicy:
        params = {**UPDATE_POLICY_CONFIG, **self.cfg.update_policy}
        return UpdatePolicy(learning_rate=params['learning_rate'], steps=params['steps'],
                            enabled=params.get('enabled', True))

    def _attacker_workload(self, key: int, size: int) -> Workload:
        policy = workload_policy_from_config(self.cfg.workload_policy)
        return generate_workload(self.data(), size, policy, derive_seed(self.seeds['attack'], key), 'train')

    def speculation(self) -> Optional[SpeculationProfile]:
        if self.cfg.surrogate_family is not None:
            return None

        oracle, db = self.oracle(), self.data()

        def build() -> SpeculationProfile:
            params = {**SPECULATION_CONFIG, **self.cfg.speculation}
            seed = derive_seed(self.seeds['attack'], 10)
            probe = build_probe_queries(db, self.cfg.probe_size, seed,
                                        params['narrow_width'], params['wide_width'])
            return build_speculation_profile(oracle, db, params['candidates'], probe, seed,
                                             params['candidate_train_size'], params['candidate_epochs'],
                                             params['latency_repeats'])
        return self._cached('speculation', build)

    @property
    def surrogate_family(self) -> str:
        if self.cfg.surrogate_family is not None:
            return self.cfg.surrogate_family
        return self.speculation().chosen

    def surrogate(self) -> CEModel:
        if 'surrogate' in self._cache:
            return self._cache['surrogate'][0]
        family, oracle, db = self.surrogate_family, self.oracle(), self.data()
        params = {**SURROGATE_CONFIG, **self.cfg.surrogate}
        workload = self._attacker_workload(11, params['train_size'])
        return self._cached('surrogate', lambda: train_surrogate(
            family, oracle, workload, db.schema, self.cfg.surrogate_mode, params['lr'], params['epochs'],
            derive_seed(self.seeds['attack'], 12), params['batch_size']))

    def attacker_test(self) -> Workload:
        """Тестовая нагрузка атакующего для целевой функции генератора"""
        self.data()
        return self._cached('attacker_test', lambda: self._attacker_workload(13, self.cfg.test_size))

    def detector(self) -> Optional[Detector]:
        if not self.cfg.use_detector:
            return None
        if 'detector' not in self._cache:
            params = {**DETECTOR_CONFIG, **self.cfg.detector}
            historical = encode_workload(self.workloads()['historical'], self.data().schema)
            self._cached('detector', lambda: train_detector(
                historical, params['epochs'], params['lr'], derive_seed(self.seeds['attack'], 14),
                params['beta'], params['batch_size'], self.cfg.epsilon, params['latent_dim']))
        detector = self._cache['detector'][0]
        if detector.epsilon != self.cfg.epsilon:
            # Сеть общая, порог свой
            detector = copy.copy(detector)
            detector.epsilon = self.cfg.epsilon
        return detector

    def generator_config(self) -> GenTrainConfig:
        overrides = {'batch': self.cfg.budget, **self.cfg.generator}
        return GenTrainConfig.from_config(overrides, self.cfg.train_size)

    def generator(self) -> Tuple[GeneratorTriple, TrainingTrace]:
        if 'generator' in self._cache:
            return self._cache['generator'][0]
        gen_cfg = self.generator_config()
        surrogate, detector, test = self.surrogate(), self.detector(), self.attacker_test()
        label_fn = self.oracle().label_fn
        seed = derive_seed(self.seeds['attack'], 15)

        def build() -> Tuple[GeneratorTriple, TrainingTrace]:
            g = build_generator(self.data().schema, gen_cfg, seed)
            if self.cfg.algorithm == 'basic':
                return train_generator_basic(g, surrogate, label_fn, test, gen_cfg, seed, detector)
            return train_generator_accelerated(g, surrogate, detector, label_fn, test, gen_cfg, seed)
        return self._cached('generator', build)

    def poison(self, method: str) -> Workload:
        """Отравляющая нагрузка метода; для pace - выборка из обученного генератора"""
        if method not in METHODS:
            raise ConfigurationError(f"Неизвестный метод атаки: {method}")
        key = f'attack:{method}'
        if key in self._cache:
            return self._cache[key][0]
        # У каждого метода своё зерно
        seed = derive_seed(self.seeds['attack'], 20 + METHODS.index(method))
        db, label_fn = self.data(), self.oracle().label_fn
        if method == 'pace':
            g, _ = self.generator()
            return self._cached(key, lambda: generate_poison(g, db.schema, self.cfg.budget, label_fn, seed))
        surrogate, gen_cfg = self.surrogate(), self.generator_config()
        policy = workload_policy_from_config(self.cfg.workload_policy)
        generator = None
        if method == 'lb_g':
            # обучение генератора lb_g - генерация, а не атака
            generator, _ = self._cached(f'{GENERATION_PREFIX}:lb_g', lambda: train_lb_generator(
                surrogate, label_fn, gen_cfg, seed))
        return self._cached(key, lambda: baseline_attack(method, surrogate, db, self.cfg.budget, seed,
                                                         label_fn=label_fn, cfg=gen_cfg, policy=policy,
                                                         generator=generator))

    def poisoned_model(self, method: str) -> CEModel:
        """Функциональная копия чёрного ящика после обновления на отравляющих запросах"""
        poison, model = self.poison(method), self.black_box()
        return self._cached(f'update:{method}', lambda: incremental_update(model, poison, self.update_policy()))

    def divergence(self, method: str) -> float:
        schema = self.data().schema
        return js_divergence(encode_workload(self.poison(method), schema),
                             encode_workload(self.workloads()['historical'], schema))

    def overhead(self) -> Dict[str, float]:
        """Непересекающиеся интервалы: обучение атакующего, генерация, атака"""
        return {
            'train_time_s': sum(self.stage_seconds(k) for k in TRAINING_STAGES),
            'generation_time_s': sum(self.stage_seconds(k) for k in self._cache
                                     if k.split(':')[0] == GENERATION_PREFIX),
            'attack_time_s': sum(self.stage_seconds(k) for k in self._cache
                                 if k.startswith('attack:') or k.startswith('update:')),
        }

    def run(self, methods: Optional[Sequence[str]] = None) -> AttackReport:
        """
        Полный прогон для списка методов

        Args:
            methods: Методы атаки (по умолчанию только pace)

        Returns:
            AttackReport; при сбое этапа частичные артефакты сохраняются в out_dir
        """
        methods = list(methods or ['pace'])
        try:
            clean = self.clean()
            poisoned, divergence, counts = {}, {}, {}
            for method in methods:
                poisoned[method] = evaluate(self.poisoned_model(method), self.workloads()['test'])
                divergence[method] = self.divergence(method)
                counts[method] = len(self.poison(method))
                logger.info(f"Метод {method}: Q-error {clean.mean:.3f} -> {poisoned[method].mean:.3f} "
                            f"(x{ratio(poisoned[method].mean, clean.mean):.2f}), "
                            f"расхождение {divergence[method]:.4f}")
        except StageError:
            self._save_partial()
            raise

        counters, traces = {}, {}
        if 'generator' in self._cache:
            _, trace = self.generator()
            counters = trace.to_dict()
            traces = {'objective': list(trace.objective)}
        profile = self.speculation()
        return AttackReport(
            config=self.cfg.to_dict(),
            seeds=dict(self.seeds),
            database=self.data().fingerprint,
            budget=self.cfg.budget,
            black_box_family=self.cfg.black_box_family,
            surrogate_family=self.surrogate_family,
            clean=clean,
            poisoned=poisoned,
            divergence=divergence,
            poison_counts=counts,
            counters=counters,
            traces=traces,
            overhead=self.overhead(),
            speculation=profile.to_dict() if profile is not None else None,
        )

    def _save_partial(self) -> None:
        if not self.out_dir:
            return
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, 'partial.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump({'completed_stages': sorted(self._cache), 'metrics': self.metrics.get_metrics(),
                       'config': self.cfg.to_dict()}, f, ensure_ascii=False, indent=2, sort_keys=True)
        logger.error(f"Эксперимент прерван, частичные результаты: {path}")


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> AttackReport:
    """Полный эксперимент для атаки pace"""
    return Experiment(cfg, out_dir).run(['pace'])


def chain_violations(means: Mapping[str, float]) -> List[Tuple[str, str]]:
    """
    Соседние пары METHOD_CHAIN (среди присутствующих методов), где более
    сильный метод дал меньший средний Q-error, чем следующий за ним
    """
    present = [m for m in METHOD_CHAIN if m in means]
    return [(stronger, weaker) for stronger, weaker in zip(present, present[1:])
            if means[stronger] < means[weaker]]


def compare_methods(cfg: ExperimentConfig, methods: Optional[Sequence[str]] = None,
                    out_dir: Optional[str] = None, strict: bool = False) -> pd.DataFrame:
    """
    Сравнение методов на одной чистой модели и одном бюджете

    Args:
        cfg: Конфигурация эксперимента
        methods: Методы (по умолчанию cfg.methods)
        out_dir: Каталог частичных артефактов
        strict: Бросать AttackOrderingError при нарушении порядка

    Returns:
        Таблица по методам; attrs['ordering_holds'] - pace строго сильнее каждого базового метода,
        attrs['chain_holds'] - нестрогая цепочка pace >= lb_g >= greedy >= lb_s >= random,
        attrs['violations'] - нарушенные пары цепочки, attrs['report'] - полный AttackReport
    """
    methods = list(methods or cfg.methods)
    if len(methods) < 2:
        raise ConfigurationError("Для сравнения нужно не меньше двух методов")
    report = Experiment(cfg, out_dir).run(methods)
    table = report.to_frame()
    means = {m: report.poisoned[m].mean for m in methods}
    holds = True
    if 'pace' in means:
        # pace должен быть строго сильнее каждого базового метода
        weaker = [m for m in methods if m != 'pace' and means[m] >= means['pace']]
        if weaker:
            holds = False
            logger.warning(f"pace не сильнее методов {weaker} по среднему Q-error")
    violations = chain_violations(means)
    for stronger, weaker in violations:
        logger.warning(f"⚠️ Порядок нарушен: {stronger} ({means[stronger]:.3f}) < {weaker} ({means[weaker]:.3f})")
    table.attrs['ordering_holds'] = holds
    table.attrs['chain_holds'] = not violations
    table.attrs['violations'] = violations
    table.attrs['report'] = report
    if strict and (violations or not holds):
        raise AttackOrderingError(f"Нарушен порядок методов атаки: {violations or 'pace не сильнее всех'}",
                                  violations)
    return table


def run_incremental_scenario(cfg: ExperimentConfig, parts: int = 5,
                             out_dir: Optional[str] = None) -> List[AttackReport]:
    """
    Инкрементальный сценарий: обучающая нагрузка делится на части, после
    дообучения жертвы на каждой части проводится новая атака

    Returns:
        По одному AttackReport на часть
    """
    if parts < 2:
        raise ConfigurationError(f"Нужно не меньше двух частей: {parts}")
    base = Experiment(cfg, out_dir)
    db = base.data()
    chunks = base.workloads()['train'].split(parts)
    params = {**TRAIN_CONFIG, **cfg.train}
    reports: List[AttackReport] = []
    model: Optional[CEModel] = None
    round_cfg = cfg
    for i, chunk in enumerate(chunks):
        seed = derive_seed(cfg.seeds['model'], 100 + i)
        with stage(f'incremental:{i + 1}', base.metrics):
            if model is None:
                model = build_model(cfg.black_box_family, db.schema, cfg.black_box_hyperparams,
                                    seed=cfg.seeds['model'], normalizer=LabelNormalizer.from_database(db))
            model = train(model, chunk, lr=params['lr'], epochs=params['epochs'],
                          batch_size=params['batch_size'], seed=seed, patience=params['patience'])
            experiment = base.fork(round_cfg, keep=('data', 'workloads', 'detector', 'attacker_test'),
                                   black_box=model)
            report = experiment.run(['pace'])
        if round_cfg.surrogate_family is None:
            round_cfg = replace(round_cfg, surrogate_family=report.surrogate_family)
        reports.append(report)
        logger.info(f"Раунд {i + 1}/{parts}: x{report.ratio('pace'):.2f}")
        # жертва продолжает обучение с отравленного состояния
        model = experiment.poisoned_model('pace')

    first = reports[0].poisoned['pace'].mean
    later = [r.poisoned['pace'].mean for r in reports[1:]]
    if any(value >= first for value in later):
        logger.warning("Ошибка после первой атаки не превышает ошибки последующих раундов")
    return reports


def _cell_config(cfg: ExperimentConfig, parameter: str, value: Any) -> ExperimentConfig:
    if parameter == 'poison_budget':
        return replace(cfg, poison_budget=int(value))
    if parameter == 'epsilon':
        return replace(cfg, epsilon=float(value), use_detector=True)
    if parameter == 'surrogate_family':
        return replace(cfg, surrogate_family=str(value))
    if parameter == 'surrogate_mode':
        return replace(cfg, surrogate_mode=str(value))
    if parameter == 'algorithm':
        return replace(cfg, algorithm=str(value))
    if parameter == 'detector':
        return replace(cfg, use_detector=bool(value))
    hyperparams = dict(cfg.black_box_hyperparams or {})
    hyperparams[parameter] = int(value) if parameter == 'layers' else float(value)
    return replace(cfg, black_box_hyperparams=hyperparams)


def sweep(cfg: ExperimentConfig, parameter: str, values: Sequence[Any],
          out_dir: Optional[str] = None) -> pd.DataFrame:
    """
    Развёртка одного параметра при фиксированных зёрнах

    Args:
        cfg: Базовая конфигурация
        parameter: Один из SWEEP_PARAMETERS
        values: Значения параметра

    Returns:
        Таблица: значение, чистая и отравленная ошибки, отношение, расхождение, накладные расходы
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigurationError(f"Неизвестный параметр развёртки: {parameter}. Доступны: {list(SWEEP_PARAMETERS)}")
    if not values:
        raise ConfigurationError("Пустой список значений развёртки")
    base = Experiment(cfg, out_dir)
    keep = [k for k in _SHARED_STAGES if k not in _SWEEP_INVALIDATES[parameter]] + ['attacker_test']
    rows = []
    for value in values:
        experiment = base.fork(_cell_config(cfg, parameter, value), keep=keep)
        report = experiment.run(['pace'])
        for key, cached in experiment._cache.items():
            # Общие этапы первой ячейки достаются следующим
            if key in keep and key not in base._cache:
                base._cache[key] = cached
        row = {
            'parameter': parameter,
            'value': value,
            'clean_mean': report.clean.mean,
            'poisoned_mean': report.poisoned['pace'].mean,
            'ratio': report.ratio('pace'),
            'divergence': report.divergence['pace'],
            'surrogate_family': report.surrogate_family,
            'total_steps': report.counters.get('total_steps'),
            'final_objective': report.counters.get('final_objective'),
            **report.overhead,
        }
        if parameter == 'epsilon':
            # Эффект на единицу расхождения
            row['effectiveness_per_divergence'] = (
                row['ratio'] / row['divergence'] if row['divergence'] > 0 else None)
        rows.append(row)
        logger.info(f"Развёртка {parameter}={value}: x{row['ratio']:.2f}")
    return pd.DataFrame(rows)


def run_speculation_trials(cfg: ExperimentConfig, families: Optional[Sequence[str]] = None,
                           trials: int = 20) -> pd.DataFrame:
    """
    Точность угадывания семейства: чёрные ящики разных семейств по кругу

    Returns:
        Таблица испытаний; attrs['accuracy'] - общая точность,
        attrs['per_family'] - точность по семейству чёрного ящика
    """
    families = list(families or FAMILIES)
    if trials < 1:
        raise ConfigurationError(f"trials должен быть >= 1: {trials}")
    base = Experiment(cfg)
    rows = []
    for t in range(trials):
        family = families[t % len(families)]
        # Семейства по кругу, зёрна модели и атаки свои на испытание
        trial_cfg = replace(cfg, black_box_family=family, surrogate_family=None,
                            seeds={**cfg.seeds, 'model': derive_seed(cfg.seeds['model'], t),
                                   'attack': derive_seed(cfg.seeds['attack'], t)})
        experiment = base.fork(trial_cfg, keep=('data', 'workloads'))
        profile = experiment.speculation()
        rows.append({'trial': t, 'black_box_family': family, 'chosen': profile.chosen,
                     'correct': profile.chosen == family, 'tie': profile.tie})
        logger.info(f"Испытание {t + 1}/{trials}: {family} -> {profile.chosen}")
    table = pd.DataFrame(rows)
    table.attrs['accuracy'] = float(table['correct'].mean())
    table.attrs['per_family'] = table.groupby('black_box_family')['correct'].mean().to_dict()
    return table
