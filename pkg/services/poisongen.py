"""
Генератор отравляющих запросов: три подсети, выборка, двухуровневая
целевая функция, базовый и ускоренный алгоритмы обучения и базовые атаки
"""

import copy
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from config import BASELINE_CONFIG, GENERATOR_CONFIG, SHOW_PROGRESS
from services.datastore import Database, Schema, true_cardinality
from services.detector import Detector, abnormal_mask, reconstruction_loss
from services.estimators import CEModel, UpdatePolicy, incremental_update, qerror_loss
from services.querylang import (
    Query,
    Workload,
    WorkloadPolicy,
    decode,
    encode_workload,
    generate_workload,
    sample_range,
)
from utils.error_handler import (
    ConfigurationError,
    GeneratorDivergenceError,
    GeneratorSamplingError,
    ModelError,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
BCE_CLAMP = 1e-7
BASELINES = ('random', 'lb_s', 'greedy', 'lb_g')
ALGORITHMS = ('basic', 'accelerated')

LabelFn = Callable[[Query], int]


@dataclass
class GenTrainConfig:
    """Параметры обучения генератора"""
    learning_rate: float = GENERATOR_CONFIG['learning_rate']
    alpha: float = GENERATOR_CONFIG['alpha']
    total_steps: int = GENERATOR_CONFIG['total_steps']
    update_steps: int = GENERATOR_CONFIG['update_steps']
    batch: int = 250
    repeats: int = GENERATOR_CONFIG['repeats']
    noise_dim: int = GENERATOR_CONFIG['noise_dim']
    hidden_dim: int = GENERATOR_CONFIG['hidden_dim']
    layers: Tuple[int, int, int] = tuple(GENERATOR_CONFIG['layers'])
    max_retries: int = GENERATOR_CONFIG['max_retries']
    grad_norm_floor: float = GENERATOR_CONFIG['grad_norm_floor']
    step_multiplier: float = GENERATOR_CONFIG['step_multiplier']
    inner_clip: Optional[float] = GENERATOR_CONFIG['inner_clip']
    first_order: bool = GENERATOR_CONFIG['first_order']

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if self.update_steps < 1 or self.total_steps < self.update_steps or self.total_steps % self.update_steps:
            raise ConfigurationError(
                f"Требуется K >= 1, M >= K и K | M: M={self.total_steps}, K={self.update_steps}")
        if self.learning_rate <= 0 or self.batch <= 0 or self.alpha < 0:
            raise ConfigurationError("learning_rate и batch должны быть > 0, alpha >= 0")
        if self.repeats < 1 or self.max_retries < 1:
            raise ConfigurationError("repeats и max_retries должны быть >= 1")

    @classmethod
    def from_config(cls, overrides: Optional[Mapping[str, Any]] = None, train_size: Optional[int] = None) -> 'GenTrainConfig':
        """Из GENERATOR_CONFIG: размер батча - доля обучающей нагрузки, если не задан явно"""
        params = dict(GENERATOR_CONFIG)
        params.update(overrides or {})
        known = {f.name for f in fields(cls)} | {'batch_fraction'}
        unknown = set(params) - known
        if unknown:
            raise ConfigurationError(f"Неизвестные параметры генератора: {sorted(unknown)}")
        fraction = params.pop('batch_fraction')
        if params.get('batch') is None:
            if train_size is None:
                raise ConfigurationError("Нужен либо batch, либо размер обучающей нагрузки")
            params['batch'] = max(1, int(round(fraction * train_size)))
        return cls(**params)

    @property
    def inner_iterations(self) -> int:
        return self.total_steps // self.update_steps


@dataclass
class TrainingTrace:
    """След обучения генератора: значения целевой функции и счётчики шагов"""
    algorithm: str
    objective: List[float] = field(default_factory=list)
    join_loss: List[float] = field(default_factory=list)
    abnormal: List[int] = field(default_factory=list)
    generator_steps: int = 0
    surrogate_updates: int = 0
    escapes: int = 0
    empty_batches: int = 0

    @property
    def total_steps(self) -> int:
        return self.generator_steps + self.surrogate_updates

    def to_dict(self) -> Dict[str, Any]:
        return {
            'algorithm': self.algorithm,
            'generator_steps': self.generator_steps,
            'surrogate_updates': self.surrogate_updates,
            'total_steps': self.total_steps,
            'escapes': self.escapes,
            'empty_batches': self.empty_batches,
            'final_objective': self.objective[-1] if self.objective else None,
        }


def _generator_mlp(input_dim: int, output_dim: int, layers: int, hidden: int) -> nn.Sequential:
    widths = [input_dim] + [hidden] * (layers - 1) + [output_dim]
    modules: List[nn.Module] = []
    for i in range(len(widths) - 1):
        modules.append(nn.Linear(widths[i], widths[i + 1]))
        modules.append(nn.ReLU() if i < len(widths) - 2 else nn.Sigmoid())
    return nn.Sequential(*modules)


class GeneratorTriple(nn.Module):
    """
    G_j: шум -> мягкий вектор соединения; G_l и G_r: (шум, x_join) -> нижние
    границы и доли диапазона. Для однотабличной схемы G_j не нужен.
    """

    def __init__(self, schema: Schema, noise_dim: int, hidden_dim: int, layers: Sequence[int]):
        super().__init__()
        self.n, self.m = schema.n, schema.m
        self.noise_dim = noise_dim
        self.join = _generator_mlp(noise_dim, self.n, layers[0], hidden_dim) if self.n > 1 else None
        self.lower = _generator_mlp(noise_dim + self.n, self.m, layers[1], hidden_dim)
        self.range = _generator_mlp(noise_dim + self.n, self.m, layers[2], hidden_dim)
        self.register_buffer('attr_tables', torch.as_tensor(schema.attribute_tables, dtype=torch.long),
                             persistent=False)

    def join_parameters(self) -> List[nn.Parameter]:
        return [] if self.join is None else list(self.join.parameters())

    def selection_parameters(self) -> List[nn.Parameter]:
        return list(self.lower.parameters()) + list(self.range.parameters())

    def selection(self, noise: torch.Tensor, x_join: torch.Tensor) -> torch.Tensor:
        """Полное кодирование x_join ⊕ x_sel с маскированием атрибутов отсутствующих таблиц"""
        inputs = torch.cat([noise, x_join], dim=1)
        lb = self.lower(inputs)
        ub = lb + self.range(inputs) * (1 - lb)
        mask = x_join[:, self.attr_tables]
        lb = lb * mask
        ub = ub * mask + (1 - mask)
        x_sel = torch.stack([lb, ub], dim=-1).reshape(noise.shape[0], 2 * self.m)
        return torch.cat([x_join, x_sel], dim=1)


@dataclass
class GeneratedBatch:
    """Выход генератора: кодирования, мягкие векторы соединения и использованный шум"""
    x: torch.Tensor
    x_join: torch.Tensor
    soft_join: Optional[torch.Tensor]
    noise: torch.Tensor

    def encodings(self) -> np.ndarray:
        return self.x.detach().numpy().copy()

    def queries(self, schema: Schema) -> List[Query]:
        return [decode(row, schema) for row in self.encodings()]


def build_generator(schema: Schema, cfg: Optional[GenTrainConfig] = None, seed: int = 0) -> GeneratorTriple:
    cfg = cfg or GenTrainConfig()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        g = GeneratorTriple(schema, cfg.noise_dim, cfg.hidden_dim, cfg.layers).to(DTYPE)
    return g


def sample_noise(count: int, noise_dim: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randn(count, noise_dim, generator=generator, dtype=DTYPE)


def _valid_codes(schema: Schema) -> set:
    return {sum(1 << t for t in p) for p in schema.join_patterns}


def sample_queries(
    g: GeneratorTriple,
    Z: torch.Tensor,
    schema: Schema,
    max_retries: int = GENERATOR_CONFIG['max_retries'],
    generator: Optional[torch.Generator] = None,
) -> GeneratedBatch:
    """
    Выборка кодирований запросов из генератора

    Строки с недопустимым округлённым соединением получают новый шум,
    пока соединение не станет допустимым (не более max_retries раз).

    Args:
        g: Генератор
        Z: Батч гауссова шума
        schema: Схема базы
        max_retries: Число повторных попыток на строку
        generator: Источник случайности для повторных попыток

    Returns:
        GeneratedBatch с жёсткими кодированиями и мягкими векторами соединения
    """
    if max_retries < 1:
        raise ConfigurationError("max_retries должен быть >= 1")
    Z = Z.clone()
    if g.join is None:
        x_join = torch.ones(Z.shape[0], 1, dtype=DTYPE)
        return GeneratedBatch(g.selection(Z, x_join), x_join, None, Z)

    # Код соединения: битовая маска таблиц
    weights = 1 << torch.arange(schema.n)
    valid = _valid_codes(schema)
    with torch.no_grad():
        for attempt in range(max_retries + 1):
            soft = g.join(Z)
            codes = ((soft > 0.5).long() * weights).sum(dim=1).tolist()
            invalid = [i for i, c in enumerate(codes) if c not in valid]
            if not invalid:
                break
            if attempt == max_retries:
                raise GeneratorSamplingError(
                    f"{len(invalid)} строк без допустимого соединения за {max_retries} попыток",
                    soft_join=soft[invalid[0]].tolist())
            # Новый шум только для недопустимых строк
            Z[invalid] = torch.randn(len(invalid), Z.shape[1], generator=generator, dtype=DTYPE)
    # Повторный проход с графом: G_j обучается по мягкому выходу
    soft = g.join(Z)
    x_join = (soft.detach() > 0.5).to(DTYPE)
    return GeneratedBatch(g.selection(Z, x_join), x_join, soft, Z)


def join_loss(soft: torch.Tensor, hard: torch.Tensor) -> torch.Tensor:
    """
    Бинарная кросс-энтропия мягкого вектора соединения относительно округлённого

    Args:
        soft: Выход G_j в (0, 1)
        hard: Бинарный вектор той же формы

    Returns:
        Сумма по таблицам, среднее по строкам батча
    """
    if soft.shape != hard.shape:
        raise ConfigurationError(f"Разные формы: {tuple(soft.shape)} и {tuple(hard.shape)}")
    p = soft.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    per_row = -(hard * torch.log(p) + (1 - hard) * torch.log(1 - p)).sum(dim=-1)
    return per_row.mean() if per_row.dim() else per_row


def _clip_scale(grads: Sequence[torch.Tensor], clip: Optional[float]) -> torch.Tensor:
    if clip is None:
        return torch.tensor(1.0, dtype=DTYPE)
    norm = torch.sqrt(sum((g ** 2).sum() for g in grads))
    return torch.clamp(clip / (norm + 1e-12), max=1.0)


def _as_tensor(values: Any) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def workload_loss_sum(model: CEModel, X: Any, labels: Any, params: Optional[Mapping[str, torch.Tensor]] = None) -> torch.Tensor:
    """Сумма Q-error модели по нагрузке"""
    X = _as_tensor(X)
    values = model(X) if params is None else model.functional_forward(params, X)
    return qerror_loss(values, model.log_max(X.detach().numpy()), _as_tensor(labels)).sum()


def _with_params(model: CEModel, params: Mapping[str, torch.Tensor]) -> CEModel:
    updated = model.clone()
    with torch.no_grad():
        for name, p in updated.network.named_parameters():
            p.copy_(params[name])
    return updated


def poisoned_objective(
    surrogate: CEModel,
    poison_x: torch.Tensor,
    poison_labels: Any,
    test_X: Any,
    test_labels: Any,
    alpha: float,
    inner_clip: Optional[float] = GENERATOR_CONFIG['inner_clip'],
    first_order: bool = False,
) -> Tuple[torch.Tensor, CEModel]:
    """
    Ошибка суррогата на тестовой нагрузке после одного шага обучения на отравляющем батче

    Args:
        surrogate: Суррогатная модель (не изменяется)
        poison_x: Кодирования отравляющих запросов (градиент течёт через шаг обновления)
        poison_labels: Истинные кардинальности (> 0)
        test_X: Кодирования тестовой нагрузки
        test_labels: Её кардинальности
        alpha: Шаг внутреннего обновления
        inner_clip: Порог нормы градиента внутреннего шага (None - без обрезки)
        first_order: Градиент по кодированиям через конечно-разностное произведение
            гессиана на вектор вместо второго дифференцирования; значение то же

    Returns:
        (значение F, временно обновлённая модель f_tmp)
    """
    if poison_labels is None:
        raise ModelError("Отравляющие запросы не размечены")
    labels_p = _as_tensor(poison_labels)
    if labels_p.numel() != poison_x.shape[0] or poison_x.shape[0] == 0:
        raise ModelError("Число меток не совпадает с числом отравляющих запросов")
    test_X = _as_tensor(test_X)
    labels_t = _as_tensor(test_labels)
    log_max_p = surrogate.log_max(poison_x.detach().numpy())
    log_max_t = surrogate.log_max(test_X.numpy())

    # Внутренний шаг: w' = w - alpha * grad по отравляющему батчу
    base = {name: p.detach().clone().requires_grad_(True) for name, p in surrogate.params().items()}
    inner_x = poison_x.detach() if first_order else poison_x
    inner = qerror_loss(surrogate.functional_forward(base, inner_x), log_max_p, labels_p).mean()
    grads = torch.autograd.grad(inner, list(base.values()), create_graph=not first_order)
    scale = _clip_scale(grads, inner_clip)
    updated = {name: w - alpha * scale * g for (name, w), g in zip(base.items(), grads)}

    if not first_order:
        value = qerror_loss(surrogate.functional_forward(updated, test_X), log_max_t, labels_t).sum()
        return value, _with_params(surrogate, updated)

    # Первый порядок: направление по тесту в точке w', затем гессиан-вектор по входам
    w_tmp = {name: w.detach().requires_grad_(True) for name, w in updated.items()}
    test_loss = qerror_loss(surrogate.functional_forward(w_tmp, test_X), log_max_t, labels_t).sum()
    direction = torch.autograd.grad(test_loss, list(w_tmp.values()))
    value = test_loss.detach()
    if not poison_x.requires_grad:
        return value, _with_params(surrogate, w_tmp)

    direction_norm = torch.sqrt(sum((v ** 2).sum() for v in direction))
    grad_x = torch.zeros_like(poison_x)
    if float(direction_norm) > 0:
        eps = 0.01 / float(direction_norm)
        x_leaf = poison_x.detach().requires_grad_(True)

        def input_grad(sign: float) -> torch.Tensor:
            shifted = {name: (w + sign * eps * v).detach() for (name, w), v in zip(base.items(), direction)}
            loss = qerror_loss(surrogate.functional_forward(shifted, x_leaf), log_max_p, labels_p).mean()
            return torch.autograd.grad(loss, x_leaf)[0]

        hessian_vector = (input_grad(1.0) - input_grad(-1.0)) / (2 * eps)
        grad_x = -alpha * float(scale) * hessian_vector
    # Значение прежнее, градиент по poison_x равен grad_x
    linear = (grad_x * poison_x).sum()
    return value + (linear - linear.detach()), _with_params(surrogate, w_tmp)


def _label_batch(batch: GeneratedBatch, schema: Schema, label_fn: LabelFn) -> Tuple[List[int], List[int]]:
    labels = [int(label_fn(q)) for q in batch.queries(schema)]
    keep = [i for i, y in enumerate(labels) if y > 0]
    return keep, [labels[i] for i in keep]


def _step_with_escape(optimizer: torch.optim.Optimizer, params: Sequence[nn.Parameter],
                      cfg: GenTrainConfig, allow_escape: bool) -> bool:
    """Шаг оптимизатора; при малой норме градиента шаг один раз увеличивается"""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(torch.sqrt(sum((g ** 2).sum() for g in grads))) if grads else 0.0
    if allow_escape and norm < cfg.grad_norm_floor:
        saved = [group['lr'] for group in optimizer.param_groups]
        for group in optimizer.param_groups:
            group['lr'] = group['lr'] * cfg.step_multiplier
        optimizer.step()
        for group, lr in zip(optimizer.param_groups, saved):
            group['lr'] = lr
        logger.debug(f"Малая норма градиента {norm:.2e}: шаг увеличен в {cfg.step_multiplier} раз")
        return True
    optimizer.step()
    return False


class _GeneratorSession:
    """Оптимизаторы и общий шаг генератора для обоих алгоритмов"""

    def __init__(self, g: GeneratorTriple, schema: Schema, cfg: GenTrainConfig, label_fn: LabelFn,
                 detector: Optional[Detector], seed: int, trace: TrainingTrace):
        self.g = g
        self.schema = schema
        self.cfg = cfg
        self.label_fn = label_fn
        self.detector = detector
        self.trace = trace
        self.noise_source = torch.Generator().manual_seed(seed)
        self.join_optimizer = torch.optim.Adam(g.join_parameters(), lr=cfg.learning_rate) if g.join is not None else None
        self.selection_optimizer = torch.optim.Adam(g.selection_parameters(), lr=cfg.learning_rate)

    def noise(self) -> torch.Tensor:
        return sample_noise(self.cfg.batch, self.cfg.noise_dim, self.noise_source)

    def step(self, Z: torch.Tensor, objective: Callable[[torch.Tensor, List[int]], Tuple[torch.Tensor, Any]],
             allow_escape: bool, fallback: Callable[[], float]) -> Tuple[torch.Tensor, Any, bool]:
        """
        Одна итерация: шаг G_j по L_j, шаг G_l/G_r по L_n на аномальных запросах,
        разметка и шаг G_l/G_r по -objective
        """
        # Шаг G_j: приближаем мягкое соединение к округлённому
        batch = sample_queries(self.g, Z, self.schema, self.cfg.max_retries, self.noise_source)
        if batch.soft_join is not None:
            self.join_optimizer.zero_grad()
            loss_j = join_loss(batch.soft_join, batch.x_join)
            loss_j.backward()
            self.join_optimizer.step()
            self.trace.join_loss.append(loss_j.detach().item())

        # Шаг G_l/G_r по ошибке реконструкции аномальных запросов
        if self.detector is not None:
            mask = abnormal_mask(self.detector, batch.encodings())
            self.trace.abnormal.append(int(mask.sum()))
            if mask.any():
                self.selection_optimizer.zero_grad()
                loss_n = reconstruction_loss(self.detector, batch.x[torch.from_numpy(mask)])
                loss_n.backward()
                self.selection_optimizer.step()
                # После шага параметры G_l/G_r изменились: кодирования строятся заново
                batch = GeneratedBatch(self.g.selection(batch.noise, batch.x_join), batch.x_join,
                                       batch.soft_join, batch.noise)

        # Разметка через канал COUNT(*) и шаг по -F
        keep, labels = _label_batch(batch, self.schema, self.label_fn)
        escaped = False
        if not keep:
            self.trace.empty_batches += 1
            logger.warning("Все отравляющие запросы батча имеют нулевую кардинальность")
            value, extra = fallback(), None
        else:
            value_t, extra = objective(batch.x[keep], labels)
            value = value_t.detach().item()
            if not math.isfinite(value):
                raise GeneratorDivergenceError(f"Целевая функция стала неконечной: {value}",
                                               trace=list(self.trace.objective))
            self.selection_optimizer.zero_grad()
            (-value_t).backward()
            escaped = _step_with_escape(self.selection_optimizer, self.g.selection_parameters(),
                                        self.cfg, allow_escape)
            self.trace.escapes += int(escaped)
        self.trace.generator_steps += 1
        self.trace.objective.append(value)
        return batch.noise, extra, escaped


def train_generator_accelerated(
    g: GeneratorTriple,
    surrogate: CEModel,
    detector: Optional[Detector],
    label_fn: LabelFn,
    test: Workload,
    cfg: GenTrainConfig,
    seed: int = 0,
) -> Tuple[GeneratorTriple, TrainingTrace]:
    """
    Ускоренное обучение: K внешних итераций по M/K шагов генератора,
    после каждой внешней итерации суррогат заменяется временно обновлённым

    Args:
        g: Исходный генератор (не изменяется)
        surrogate: Обученный суррогат
        detector: Детектор аномалий или None
        label_fn: Канал точной кардинальности
        test: Размеченная тестовая нагрузка атакующего
        cfg: Параметры обучения
        seed: Зерно шума

    Returns:
        (обученный генератор, след обучения)
    """
    g = copy.deepcopy(g)
    schema = surrogate.schema
    test_X = encode_workload(test, schema)
    test_y = test.label_array()
    trace = TrainingTrace(algorithm='accelerated')
    session = _GeneratorSession(g, schema, cfg, label_fn, detector, seed, trace)
    current = surrogate

    def objective(x: torch.Tensor, labels: List[int]):
        return poisoned_objective(current, x, labels, test_X, test_y, cfg.alpha, cfg.inner_clip, cfg.first_order)

    def fallback() -> float:
        with torch.no_grad():
            return float(workload_loss_sum(current, test_X, test_y))

    for outer in tqdm(range(cfg.update_steps), desc='generator', disable=not SHOW_PROGRESS, leave=False):
        Z = session.noise()
        escaped = False
        f_tmp = None
        for _ in range(cfg.inner_iterations):
            Z, candidate, step_escaped = session.step(Z, objective, not escaped, fallback)
            escaped = escaped or step_escaped
            f_tmp = candidate if candidate is not None else f_tmp
        # Суррогат заменяется временно обновлённой моделью последнего шага
        if f_tmp is not None:
            current = f_tmp
        trace.surrogate_updates += 1
        logger.debug(f"Внешняя итерация {outer + 1}/{cfg.update_steps}: F = {trace.objective[-1]:.3f}")

    logger.info(f"Генератор обучен (accelerated): {trace.generator_steps} шагов генератора, "
                f"{trace.surrogate_updates} обновлений суррогата, F = {trace.objective[-1]:.3f}")
    return g, trace


def train_generator_basic(
    g: GeneratorTriple,
    surrogate: CEModel,
    label_fn: LabelFn,
    test: Workload,
    cfg: GenTrainConfig,
    seed: int = 0,
    detector: Optional[Detector] = None,
) -> Tuple[GeneratorTriple, TrainingTrace]:
    """
    Базовое чередование: n_r раундов из K шагов суррогата на зафиксированном
    отравляющем наборе и M шагов генератора при замороженном суррогате
    """
    g = copy.deepcopy(g)
    schema = surrogate.schema
    test_X = encode_workload(test, schema)
    test_y = test.label_array()
    trace = TrainingTrace(algorithm='basic')
    session = _GeneratorSession(g, schema, cfg, label_fn, detector, seed, trace)
    policy = UpdatePolicy(learning_rate=cfg.alpha if cfg.alpha > 0 else GENERATOR_CONFIG['alpha'],
                          steps=cfg.update_steps)

    for round_index in tqdm(range(cfg.repeats), desc='generator-basic', disable=not SHOW_PROGRESS, leave=False):
        with torch.no_grad():
            fixed = sample_queries(g, session.noise(), schema, cfg.max_retries, session.noise_source)
        # Фиксированный отравляющий набор и K шагов суррогата на нём
        keep, labels = _label_batch(fixed, schema, label_fn)
        queries = fixed.queries(schema)
        poison = Workload([queries[i] for i in keep], labels, provenance='poison')
        frozen = incremental_update(surrogate, poison, policy)
        trace.surrogate_updates += cfg.update_steps

        def objective(x: torch.Tensor, batch_labels: List[int], model: CEModel = frozen):
            return poisoned_objective(model, x, batch_labels, test_X, test_y, cfg.alpha, cfg.inner_clip,
                                      cfg.first_order)

        def fallback(model: CEModel = frozen) -> float:
            with torch.no_grad():
                return float(workload_loss_sum(model, test_X, test_y))

        Z = session.noise()
        escaped = False
        for step in range(cfg.total_steps):
            if step % cfg.inner_iterations == 0:
                escaped = False
            Z, _, step_escaped = session.step(Z, objective, not escaped, fallback)
            escaped = escaped or step_escaped
        logger.debug(f"Раунд {round_index + 1}/{cfg.repeats}: F = {trace.objective[-1]:.3f}")

    logger.info(f"Генератор обучен (basic): {trace.total_steps} шагов, F = {trace.objective[-1]:.3f}")
    return g, trace


def generate_poison(
    g: GeneratorTriple,
    schema: Schema,
    count: int,
    label_fn: LabelFn,
    seed: int = 0,
    max_retries: int = GENERATOR_CONFIG['max_retries'],
) -> Workload:
    """Ровно count размеченных отравляющих запросов с ненулевой кардинальностью"""
    source = torch.Generator().manual_seed(seed)
    queries: List[Query] = []
    labels: List[int] = []
    # Добираем выборку, пока не наберётся count непустых запросов
    for _ in range(max_retries):
        missing = count - len(queries)
        if missing <= 0:
            break
        with torch.no_grad():
            batch = sample_queries(g, sample_noise(missing, g.noise_dim, source), schema, max_retries, source)
        for query in batch.queries(schema):
            y = int(label_fn(query))
            if y > 0:
                queries.append(query)
                labels.append(y)
    if len(queries) < count:
        raise GeneratorSamplingError(f"Получено только {len(queries)} из {count} непустых отравляющих запросов")
    return Workload(queries[:count], labels[:count], provenance='poison')


def evaluate_generator(
    g: GeneratorTriple,
    surrogate: CEModel,
    label_fn: LabelFn,
    test: Workload,
    budget: int,
    policy: Optional[UpdatePolicy] = None,
    seed: int = 0,
) -> float:
    """Итоговая целевая функция: потеря на тесте после K-шагового обновления суррогата на выборке генератора"""
    poison = generate_poison(g, surrogate.schema, budget, label_fn, seed)
    updated = incremental_update(surrogate, poison, policy or UpdatePolicy())
    with torch.no_grad():
        return float(workload_loss_sum(updated, encode_workload(test, surrogate.schema), test.label_array()))


def normalize_trace(trace: Sequence[float]) -> List[float]:
    """Min-max нормализация следа целевой функции"""
    values = np.asarray(trace, dtype=np.float64)
    if values.size == 0:
        return []
    span = values.max() - values.min()
    if span == 0:
        return [0.0] * values.size
    return ((values - values.min()) / span).tolist()


def surrogate_losses(surrogate: CEModel, workload: Workload) -> np.ndarray:
    """Q-error суррогата для каждого размеченного запроса"""
    X = encode_workload(workload, surrogate.schema)
    with torch.no_grad():
        values = surrogate(torch.from_numpy(X))
        return qerror_loss(values, surrogate.log_max(X), torch.from_numpy(workload.label_array())).numpy().copy()


@dataclass
class GreedyChoice:
    """Результат жадного подбора одного запроса"""
    query: Query
    label: int
    loss: float
    first_losses: List[float]
    best_losses: List[float]


def greedy_query(
    rng: np.random.Generator,
    surrogate: CEModel,
    label_fn: LabelFn,
    tables: frozenset,
    candidates: int,
    policy: WorkloadPolicy,
    passes: int = BASELINE_CONFIG['greedy_passes'],
) -> Optional[GreedyChoice]:
    """
    Жадный запрос по фиксированным наборам из candidates диапазонов на атрибут шаблона.

    Первый проход выбирает лучший диапазон атрибута при уже выбранных предыдущих.
    Следующие проходы перебирают диапазоны каждого атрибута при фиксированных
    остальных и принимают замену только при росте потери всего запроса.
    Итоговая потеря - потеря именно возвращаемого запроса.
    """
    schema = surrogate.schema
    names = [name for i, name in enumerate(schema.attribute_names) if schema.attribute_tables[i] in tables]
    pools = {name: [sample_range(rng, policy.width_min, policy.width_max) for _ in range(candidates)]
             for name in names}

    def score(predicates: Dict[str, Tuple[float, float]]) -> Optional[Tuple[int, float]]:
        query = Query(tables=tables, predicates=predicates)
        y = int(label_fn(query))
        if y <= 0:
            return None
        return y, float(surrogate_losses(surrogate, Workload([query], [y], provenance='poison'))[0])

    predicates: Dict[str, Tuple[float, float]] = {}
    current: Optional[Tuple[int, float]] = None
    first_losses, best_losses = [], []
    for name in names:
        chosen, first = None, None
        for bounds in pools[name]:
            scored = score({**predicates, name: bounds})
            if scored is None:
                continue
            if first is None:
                first = scored[1]
            if chosen is None or scored[1] > chosen[1][1]:
                chosen = (bounds, scored)
        if chosen is None:
            continue
        predicates[name] = chosen[0]
        current = chosen[1]
        first_losses.append(first)
        best_losses.append(current[1])
    if current is None:
        return None

    for _ in range(passes - 1):
        improved = False
        for name in list(predicates):
            for bounds in pools[name]:
                if bounds == predicates[name]:
                    continue
                scored = score({**predicates, name: bounds})
                # Замена только с ростом потери: current всегда соответствует predicates
                if scored is not None and scored[1] > current[1]:
                    predicates[name] = bounds
                    current = scored
                    improved = True
        if not improved:
            break
    return GreedyChoice(Query(tables=tables, predicates=dict(predicates)), current[0], current[1],
                        first_losses, best_losses)


def train_lb_generator(
    surrogate: CEModel,
    label_fn: LabelFn,
    cfg: GenTrainConfig,
    seed: int,
) -> Tuple[GeneratorTriple, TrainingTrace]:
    """Генератор, максимизирующий потерю неотравленного суррогата на самих отравляющих запросах"""
    schema = surrogate.schema
    g = build_generator(schema, cfg, seed)
    trace = TrainingTrace(algorithm='lb_g')
    session = _GeneratorSession(g, schema, cfg, label_fn, None, seed, trace)

    def objective(x: torch.Tensor, labels: List[int]):
        return workload_loss_sum(surrogate, x, labels), None

    Z = session.noise()
    for _ in range(cfg.total_steps):
        Z, _, _ = session.step(Z, objective, False, lambda: 0.0)
    return g, trace


def baseline_attack(
    method: str,
    surrogate: CEModel,
    db: Database,
    budget: int,
    seed: int = 0,
    label_fn: Optional[LabelFn] = None,
    cfg: Optional[GenTrainConfig] = None,
    policy: Optional[WorkloadPolicy] = None,
    generator: Optional[GeneratorTriple] = None,
) -> Workload:
    """
    Базовые атаки: random, lb_s, greedy, lb_g

    Args:
        method: Имя метода
        surrogate: Неотравленный суррогат
        db: База атакующего (канал меток и генерация случайных запросов)
        budget: Число отравляющих запросов
        seed: Зерно
        label_fn: Канал точной кардинальности (по умолчанию через db)
        cfg: Параметры генератора для lb_g
        policy: Политика случайных запросов
        generator: Уже обученный генератор lb_g (иначе обучается здесь)

    Returns:
        Размеченная нагрузка с provenance='poison'
    """
    if budget < 1:
        raise ConfigurationError(f"Бюджет атаки должен быть >= 1: {budget}")
    if method not in BASELINES:
        raise ConfigurationError(f"Неизвестный базовый метод: {method}. Доступны: {list(BASELINES)}")
    if label_fn is None:
        def label_fn(query: Query) -> int:
            return true_cardinality(db, query)
    policy = policy or WorkloadPolicy()

    if method == 'random':
        return generate_workload(db, budget, policy, seed, provenance='poison')
    if method == 'lb_s':
        # Пул в lb_s_pool_factor раз больше бюджета, берём запросы с наибольшей потерей
        pool = generate_workload(db, BASELINE_CONFIG['lb_s_pool_factor'] * budget, policy, seed, provenance='poison')
        losses = surrogate_losses(surrogate, pool)
        top = np.argsort(-losses, kind='stable')[:budget]
        return pool.subset(sorted(top.tolist()))
    if method == 'greedy':
        rng = np.random.default_rng(seed)
        patterns = db.schema.join_patterns
        queries, labels = [], []
        attempts = 0
        while len(queries) < budget:
            attempts += 1
            if attempts > budget * 100:
                raise ModelError("Жадная атака не смогла набрать непустые запросы")
            choice = greedy_query(rng, surrogate, label_fn, patterns[rng.integers(len(patterns))],
                                  BASELINE_CONFIG['greedy_candidates'], policy)
            if choice is not None:
                queries.append(choice.query)
                labels.append(choice.label)
        return Workload(queries, labels, provenance='poison')

    cfg = cfg or GenTrainConfig(batch=budget)
    g = generator
    if g is None:
        g, _ = train_lb_generator(surrogate, label_fn, cfg, seed)
    return generate_poison(g, db.schema, budget, label_fn, seed + 1, cfg.max_retries)
