"""
Обучаемые по запросам оценщики кардинальности: шесть семейств моделей,
Q-error как функция потерь, обучение, инкрементальное обновление и оценка
"""

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.func import functional_call
from tqdm import tqdm

from config import FAMILIES, MODEL_HYPERPARAMS, SHOW_PROGRESS, TRAIN_CONFIG, UPDATE_POLICY_CONFIG
from services.datastore import Database, Schema
from services.querylang import Query, Workload, encode_workload
from utils.calculations import calculate_qerror, summarize_qerrors
from utils.error_handler import ConfigurationError, DimensionMismatchError, InvalidQueryError, ModelError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


class LabelNormalizer:
    """Максимальная кардинальность каждого шаблона соединения для нормализации меток"""

    def __init__(self, n_tables: int, maxima: Mapping[FrozenSet[int], int]):
        self.n_tables = n_tables
        self.maxima: Dict[FrozenSet[int], int] = {}
        self._log_max_by_code: Dict[int, float] = {}
        for tables, value in maxima.items():
            tables = frozenset(int(t) for t in tables)
            if value < 1:
                raise ConfigurationError(f"Максимум шаблона {sorted(tables)} должен быть >= 1, получен {value}")
            self.maxima[tables] = int(value)
            self._log_max_by_code[self._code(tables)] = math.log1p(value)

    @staticmethod
    def _code(tables: Iterable[int]) -> int:
        return sum(1 << int(t) for t in tables)

    @classmethod
    def from_database(cls, db: Database) -> 'LabelNormalizer':
        return cls(db.schema.n, {p: db.max_cardinality(p) for p in db.schema.join_patterns})

    @classmethod
    def from_label_fn(cls, schema: Schema, label_fn: Callable[[Query], int]) -> 'LabelNormalizer':
        """Через канал COUNT(*): запросы без предикатов по каждому шаблону"""
        return cls(schema.n, {p: label_fn(Query(tables=p)) for p in schema.join_patterns})

    def pattern_max(self, tables: Iterable[int]) -> int:
        key = frozenset(tables)
        if key not in self.maxima:
            raise InvalidQueryError(f"Нет максимума для шаблона {sorted(key)}")
        return self.maxima[key]

    def log_max(self, X: np.ndarray) -> np.ndarray:
        """ln(1 + max) для каждой строки матрицы кодирований по её x_join"""
        X = np.atleast_2d(np.asarray(X))
        bits = (X[:, :self.n_tables] > 0.5).astype(np.int64)
        # Код шаблона - битовая маска таблиц
        codes = bits @ (1 << np.arange(self.n_tables, dtype=np.int64))
        try:
            return np.array([self._log_max_by_code[int(c)] for c in codes], dtype=np.float64)
        except KeyError as e:
            raise InvalidQueryError(f"Кодирование с недопустимым шаблоном соединения (код {e})") from e

    def to_dict(self) -> Dict[str, int]:
        return {','.join(str(t) for t in sorted(k)): v for k, v in self.maxima.items()}

    @classmethod
    def from_dict(cls, n_tables: int, data: Mapping[str, int]) -> 'LabelNormalizer':
        return cls(n_tables, {frozenset(int(t) for t in k.split(',')): v for k, v in data.items()})


@dataclass
class UpdatePolicy:
    """Политика инкрементального обновления: K шагов Adam со скоростью alpha"""
    learning_rate: float = UPDATE_POLICY_CONFIG['learning_rate']
    steps: int = UPDATE_POLICY_CONFIG['steps']
    enabled: bool = True


@dataclass
class QErrorReport:
    """Сводка Q-error по тестовой нагрузке"""
    mean: float
    p50: float
    p90: float
    p95: float
    p99: float
    max: float
    per_query: List[float] = field(default_factory=list)

    def to_dict(self, with_per_query: bool = False) -> Dict[str, Any]:
        data = {k: getattr(self, k) for k in ('mean', 'p50', 'p90', 'p95', 'p99', 'max')}
        if with_per_query:
            data['per_query'] = list(self.per_query)
        return data


def _widths(hidden: Sequence[int], count: int, scale: float) -> List[int]:
    return [max(1, int(round(hidden[i % len(hidden)] * scale))) for i in range(count)]


def _mlp(widths: Sequence[int], final_activation: bool) -> nn.Sequential:
    modules: List[nn.Module] = []
    for i in range(len(widths) - 1):
        modules.append(nn.Linear(widths[i], widths[i + 1]))
        if i < len(widths) - 2 or final_activation:
            modules.append(nn.ReLU())
    return nn.Sequential(*modules)


class FCNNetwork(nn.Module):
    """Многослойный перцептрон"""

    def __init__(self, input_dim: int, layers: int, hidden: Sequence[int], scale: float):
        super().__init__()
        self.body = _mlp([input_dim] + _widths(hidden, layers - 1, scale) + [1], final_activation=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.body(x)).squeeze(-1)


class PooledFCNNetwork(nn.Module):
    """Параллельные головы-перцептроны, среднее по головам и слой слияния"""

    def __init__(self, input_dim: int, layers: int, hidden: Sequence[int], heads: int, scale: float):
        super().__init__()
        widths = [input_dim] + _widths(hidden, layers - 1, scale)
        self.heads = nn.ModuleList([_mlp(widths, final_activation=True) for _ in range(heads)])
        self.merge = nn.Linear(widths[-1], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # Усредняем головы перед общим выходным слоем
        pooled = torch.stack([head(x) for head in self.heads]).mean(dim=0)
        return torch.sigmoid(self.merge(pooled)).squeeze(-1)


class SetComponent(nn.Module):
    """Компонента множества: несколько голов над элементами и взвешенное среднее"""

    def __init__(self, element_dim: int, widths: Sequence[int], heads: int):
        super().__init__()
        self.heads = nn.ModuleList([_mlp([element_dim] + list(widths), final_activation=True) for _ in range(heads)])

    def forward(self, elements: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
        total = weights.sum(dim=1, keepdim=True).clamp_min(1e-6)
        outputs = []
        for head in self.heads:
            h = head(elements)
            if h.dim() == 2:
                pooled = weights @ h
            else:
                pooled = (h * weights.unsqueeze(-1)).sum(dim=1)
            outputs.append(pooled / total)
        return torch.stack(outputs).mean(dim=0)


class MSCNNetwork(nn.Module):
    """Множества таблиц, соединений и предикатов с отдельными головами и слиянием"""

    def __init__(self, schema: Schema, layers: int, hidden: Sequence[int], heads: int, scale: float):
        super().__init__()
        n, m = schema.n, schema.m
        self.n = n
        set_widths = _widths(hidden, max(layers - 2, 1), scale)
        edges = [(e.left_table, e.right_table) for e in schema.join_edges]

        self.register_buffer('table_features', torch.eye(n, dtype=DTYPE), persistent=False)
        # Нулевой элемент множества соединений всегда присутствует
        self.register_buffer('join_features', torch.eye(len(edges) + 1, dtype=DTYPE), persistent=False)
        self.register_buffer('edge_left', torch.tensor([a for a, _ in edges], dtype=torch.long), persistent=False)
        self.register_buffer('edge_right', torch.tensor([b for _, b in edges], dtype=torch.long), persistent=False)
        self.register_buffer('attr_onehot', torch.eye(m, dtype=DTYPE), persistent=False)
        self.register_buffer('attr_tables', torch.as_tensor(schema.attribute_tables, dtype=torch.long),
                             persistent=False)

        self.tables = SetComponent(n, set_widths, heads)
        self.joins = SetComponent(len(edges) + 1, set_widths, heads)
        self.predicates = SetComponent(m + 2, set_widths, heads)
        merge_hidden = _widths(hidden, 1, scale)[0]
        self.merge = _mlp([3 * set_widths[-1], merge_hidden, 1], final_activation=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x_join = x[:, :self.n]
        x_sel = x[:, self.n:]
        batch = x.shape[0]

        table_part = self.tables(self.table_features, x_join)

        # Ребро соединения активно, только если обе его таблицы в запросе
        edge_weights = x_join[:, self.edge_left] * x_join[:, self.edge_right]
        join_weights = torch.cat([torch.ones(batch, 1, dtype=x.dtype), edge_weights], dim=1)
        join_part = self.joins(self.join_features, join_weights)

        # Элемент множества предикатов: one-hot атрибута и пара границ
        bounds = x_sel.reshape(batch, -1, 2)
        onehot = self.attr_onehot.unsqueeze(0).expand(batch, -1, -1)
        predicate_part = self.predicates(torch.cat([onehot, bounds], dim=-1), x_join[:, self.attr_tables])

        merged = torch.cat([table_part, join_part, predicate_part], dim=-1)
        return torch.sigmoid(self.merge(merged)).squeeze(-1)


class SequenceNetwork(nn.Module):
    """Рекуррентная модель: один шаг на таблицу, вход шага - её границы и x_join"""

    def __init__(self, schema: Schema, layers: int, hidden: Sequence[int], scale: float, cell: str):
        super().__init__()
        n, m = schema.n, schema.m
        self.n = n
        per_table = [[i for i in range(m) if schema.attribute_tables[i] == t] for t in range(n)]
        width = max(len(attrs) for attrs in per_table) or 1
        # Индексы в x_sel, дополненном парой (0, 1) на позициях 2m и 2m + 1
        index = np.empty((n, 2 * width), dtype=np.int64)
        for t, attrs in enumerate(per_table):
            for j in range(width):
                if j < len(attrs):
                    index[t, 2 * j], index[t, 2 * j + 1] = 2 * attrs[j], 2 * attrs[j] + 1
                else:
                    index[t, 2 * j], index[t, 2 * j + 1] = 2 * m, 2 * m + 1
        self.register_buffer('step_index', torch.as_tensor(index), persistent=False)
        self.register_buffer('padding', torch.tensor([0.0, 1.0], dtype=DTYPE), persistent=False)

        hidden_size = _widths(hidden, 1, scale)[0]
        step_dim = 2 * width + n
        self.lstm = cell == 'LSTM'
        self.cell = nn.LSTMCell(step_dim, hidden_size) if self.lstm else nn.RNNCell(step_dim, hidden_size)
        self.head = _mlp([hidden_size] * max(layers - 1, 1) + [1], final_activation=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x_join = x[:, :self.n]
        batch = x.shape[0]
        x_sel = torch.cat([x[:, self.n:], self.padding.expand(batch, 2)], dim=1)
        h = torch.zeros(batch, self.cell.hidden_size, dtype=x.dtype)
        c = torch.zeros_like(h)
        for t in range(self.n):
            # На шаге t: границы своего блока и весь x_join
            step = torch.cat([x_sel[:, self.step_index[t]], x_join], dim=1)
            if self.lstm:
                h, c = self.cell(step, (h, c))
            else:
                h = self.cell(step, h)
        return torch.sigmoid(self.head(h)).squeeze(-1)


class LinearNetwork(nn.Module):
    """Двухслойное аффинное отображение с сигмоидой на выходе"""

    def __init__(self, input_dim: int, layers: int, hidden: Sequence[int], scale: float):
        super().__init__()
        widths = [input_dim] + _widths(hidden, layers - 1, scale) + [1]
        self.body = nn.Sequential(*[nn.Linear(widths[i], widths[i + 1]) for i in range(len(widths) - 1)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.body(x)).squeeze(-1)


class CEModel:
    """Оценщик кардинальности: семейство, гиперпараметры, сеть и контекст нормализации"""

    def __init__(
        self,
        family: str,
        hyperparams: Dict[str, Any],
        network: nn.Module,
        schema: Schema,
        normalizer: Optional[LabelNormalizer],
        seed: int,
    ):
        self.family = family
        self.hyperparams = hyperparams
        self.network = network
        self.schema = schema
        self.normalizer = normalizer
        self.seed = seed
        self.input_dim = schema.n + 2 * schema.m
        self.training_curve: List[float] = []
        self.update_steps = 0
        self.last_update_steps = 0

    def __repr__(self) -> str:
        return f"CEModel({self.family}, params={self.parameter_count})"

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatchError(f"{self.family}: ожидалась размерность {self.input_dim}, получено {x.shape[-1]}")
        return x.to(DTYPE)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.network(self._check_input(x))

    def params(self) -> Dict[str, torch.Tensor]:
        return dict(self.network.named_parameters())

    def functional_forward(self, params: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        """Прямой проход с подставленными параметрами (для дифференцирования по шагу обновления)"""
        return functional_call(self.network, dict(params), (self._check_input(x),))

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.network.parameters())

    def parameter_vector(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.network.parameters()).detach().numpy().copy()

    def require_normalizer(self) -> LabelNormalizer:
        if self.normalizer is None:
            raise ModelError(f"У модели {self.family} не задан контекст нормализации меток")
        return self.normalizer

    def log_max(self, X: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(self.require_normalizer().log_max(X))

    def clone(self) -> 'CEModel':
        other = CEModel(self.family, copy.deepcopy(self.hyperparams), copy.deepcopy(self.network),
                        self.schema, self.normalizer, self.seed)
        other.training_curve = list(self.training_curve)
        other.update_steps = self.update_steps
        other.last_update_steps = self.last_update_steps
        return other


def resolve_hyperparams(family: str, overrides: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """Гиперпараметры семейства с перекрытиями (layers, hidden_dims, heads, hidden_scale)"""
    if family not in MODEL_HYPERPARAMS:
        raise ConfigurationError(f"Неизвестное семейство модели: {family}. Доступны: {list(FAMILIES)}")
    params = dict(MODEL_HYPERPARAMS[family])
    # Масштаб ширины задаётся только перекрытием
    params['hidden_scale'] = 1.0
    for key, value in (overrides or {}).items():
        if key not in params:
            raise ConfigurationError(f"Неизвестный гиперпараметр {key} для {family}")
        params[key] = value
    params['heads'] = tuple(params['heads'])
    params['hidden_dims'] = tuple(params['hidden_dims'])
    if params['layers'] < 2 or params['hidden_scale'] <= 0:
        raise ConfigurationError(f"Недопустимые гиперпараметры {family}: {params}")
    return params


def _build_network(family: str, schema: Schema, hp: Mapping[str, Any]) -> nn.Module:
    input_dim = schema.n + 2 * schema.m
    layers, hidden, scale = hp['layers'], hp['hidden_dims'], hp['hidden_scale']
    if family == 'FCN':
        return FCNNetwork(input_dim, layers, hidden, scale)
    if family == 'FCN_POOL':
        return PooledFCNNetwork(input_dim, layers, hidden, hp['heads'][1], scale)
    if family == 'MSCN':
        return MSCNNetwork(schema, layers, hidden, hp['heads'][1], scale)
    if family in ('RNN', 'LSTM'):
        return SequenceNetwork(schema, layers, hidden, scale, family)
    return LinearNetwork(input_dim, layers, hidden, scale)


def build_model(
    family: str,
    schema: Schema,
    hyperparams: Optional[Mapping[str, Any]] = None,
    seed: int = 0,
    normalizer: Optional[LabelNormalizer] = None,
) -> CEModel:
    """
    Построение CE-модели с детерминированной инициализацией

    Args:
        family: Семейство из FAMILIES
        schema: Схема (задаёт размерность входа n + 2m)
        hyperparams: Перекрытия гиперпараметров
        seed: Зерно инициализации
        normalizer: Контекст нормализации меток (нужен для обучения и оценки)

    Returns:
        Необученная CEModel
    """
    hp = resolve_hyperparams(family, hyperparams)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        network = _build_network(family, schema, hp).to(DTYPE)
    model = CEModel(family, hp, network, schema, normalizer, seed)
    logger.debug(f"Построена модель {family}: {model.parameter_count} параметров")
    return model


def clone_model(model: CEModel) -> CEModel:
    return model.clone()


def qerror_loss(values: torch.Tensor, log_max: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """
    Поэлементный Q-error на денормализованных оценках

    Args:
        values: Нормализованные выходы модели
        log_max: ln(1 + max) шаблона для каждой строки
        targets: Целевые кардинальности (> 0)

    Returns:
        exp(|ln est - ln target|) для каждой строки
    """
    # Та же нижняя граница 1, что и при оценке: оценки < 1 не выигрывают в потере
    estimates = denormalize_tensor(values, log_max)
    return torch.exp(torch.abs(torch.log(estimates) - torch.log(targets)))


def denormalize_tensor(values: torch.Tensor, log_max: torch.Tensor) -> torch.Tensor:
    return torch.expm1(values * log_max).clamp_min(1.0)


def predict(model: CEModel, encoding: Any) -> Tuple[float, float]:
    """
    Оценка одного запроса с замером задержки

    Args:
        model: CE-модель
        encoding: QueryEncoding или вектор x

    Returns:
        (нормализованная оценка в (0, 1), задержка в секундах)
    """
    x = encoding.x if hasattr(encoding, 'x_join') else np.asarray(encoding, dtype=np.float64)
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() != 1 or x.shape[0] != model.input_dim:
        raise DimensionMismatchError(f"Ожидалась размерность {model.input_dim}, получено {tuple(x.shape)}")
    started = time.perf_counter()
    with torch.no_grad():
        value = float(model(x)[0])
    latency = time.perf_counter() - started
    return value, latency


def predict_batch(model: CEModel, X: np.ndarray) -> np.ndarray:
    """Нормализованные оценки для матрицы кодирований"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    with torch.no_grad():
        return model(torch.from_numpy(X)).numpy().copy()


def estimate_cardinalities(model: CEModel, X: np.ndarray) -> np.ndarray:
    """Денормализованные оценки (>= 1) для матрицы кодирований"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    with torch.no_grad():
        values = model(torch.from_numpy(X))
        return denormalize_tensor(values, model.log_max(X)).numpy().copy()


def fit(
    model: CEModel,
    X: np.ndarray,
    batch_loss: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    lr: float,
    epochs: int,
    batch_size: int,
    seed: int,
    patience: Optional[int] = None,
    min_delta: float = TRAIN_CONFIG['min_delta'],
    desc: str = 'train',
) -> CEModel:
    """
    Мини-батчевая минимизация произвольной потери на копии модели (Adam)

    batch_loss(values, index) получает выходы модели и индексы строк батча
    и возвращает среднюю потерю. Кривая обучения начинается с потери до обучения.
    """
    if X.shape[0] == 0:
        raise ModelError("Пустая обучающая выборка")
    if lr <= 0 or epochs < 1 or batch_size < 1:
        raise ModelError(f"Недопустимые параметры обучения: lr={lr}, epochs={epochs}, batch_size={batch_size}")
    trained = model.clone()
    inputs = torch.from_numpy(np.ascontiguousarray(X, dtype=np.float64))
    everything = torch.arange(inputs.shape[0])
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(trained.network.parameters(), lr=lr)

    with torch.no_grad():
        # Нулевая точка кривой - потеря до обучения
        curve = [float(batch_loss(trained(inputs), everything))]
    best, stale = curve[0], 0
    for epoch in tqdm(range(epochs), desc=f"{desc} {model.family}", disable=not SHOW_PROGRESS, leave=False):
        order = torch.randperm(inputs.shape[0], generator=generator)
        for start in range(0, inputs.shape[0], batch_size):
            index = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = batch_loss(trained(inputs[index]), index)
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            epoch_loss = float(batch_loss(trained(inputs), everything))
        if not math.isfinite(epoch_loss):
            raise ModelError(f"{model.family}: потеря стала неконечной на эпохе {epoch + 1}")
        curve.append(epoch_loss)
        logger.debug(f"{desc} {model.family}: эпоха {epoch + 1}/{epochs}, потеря {epoch_loss:.4f}")
        if patience is not None:
            # Ранняя остановка по полной потере эпохи
            if epoch_loss < best * (1.0 - min_delta):
                best, stale = epoch_loss, 0
            else:
                stale += 1
                if stale >= patience:
                    logger.debug(f"{desc} {model.family}: ранняя остановка на эпохе {epoch + 1}")
                    break
    trained.training_curve = curve
    return trained


def _labeled_inputs(model: CEModel, workload: Workload) -> Tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    if len(workload) == 0:
        raise ModelError("Пустая нагрузка")
    if not workload.is_labeled:
        raise ModelError("Нагрузка не размечена")
    labels = workload.label_array()
    if np.any(labels <= 0):
        raise ModelError("Нагрузка содержит нулевые метки")
    X = encode_workload(workload, model.schema)
    return X, model.log_max(X), torch.from_numpy(labels)


def train(
    model: CEModel,
    workload: Workload,
    lr: float = TRAIN_CONFIG['lr'],
    epochs: int = TRAIN_CONFIG['epochs'],
    batch_size: int = TRAIN_CONFIG['batch_size'],
    seed: int = 0,
    patience: Optional[int] = TRAIN_CONFIG['patience'],
) -> CEModel:
    """
    Обучение минимизацией среднего Q-error (ERM)

    Args:
        model: Исходная модель (не изменяется)
        workload: Размеченная нагрузка с метками > 0
        lr: Скорость обучения Adam
        epochs: Максимум эпох
        batch_size: Размер мини-батча
        seed: Зерно перемешивания
        patience: Эпох без улучшения до остановки (None - без ранней остановки)

    Returns:
        Новая обученная модель с кривой обучения
    """
    X, log_max, labels = _labeled_inputs(model, workload)

    def batch_loss(values: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
        return qerror_loss(values, log_max[index], labels[index]).mean()

    trained = fit(model, X, batch_loss, lr, epochs, batch_size, seed, patience=patience)
    logger.info(f"Модель {model.family} обучена: Q-error {trained.training_curve[0]:.3f} -> "
                f"{trained.training_curve[-1]:.3f} за {len(trained.training_curve) - 1} эпох")
    return trained


def incremental_update(model: CEModel, poison: Workload, policy: Optional[UpdatePolicy] = None) -> CEModel:
    """
    K полнобатчевых шагов Adam на новых запросах; исходная модель не меняется

    Args:
        model: Текущая модель (w_b)
        poison: Размеченные новые запросы
        policy: Политика обновления

    Returns:
        Обновлённая копия (w_p^K)
    """
    policy = policy or UpdatePolicy()
    updated = model.clone()
    if not policy.enabled:
        updated.last_update_steps = 0
        return updated
    if policy.steps <= 0:
        raise ModelError(f"Число шагов обновления должно быть >= 1, получено {policy.steps}")
    if policy.learning_rate <= 0:
        raise ModelError(f"Скорость обновления должна быть > 0, получено {policy.learning_rate}")
    if not poison.is_labeled:
        raise ModelError("Инкрементальное обновление требует размеченных запросов")
    # Пустые запросы не дают градиента Q-error и отбрасываются
    poison = poison.without_empty()
    if len(poison) == 0:
        logger.warning("Нет запросов с ненулевой кардинальностью, обновление пропущено")
        updated.last_update_steps = 0
        return updated

    X, log_max, labels = _labeled_inputs(model, poison)
    inputs = torch.from_numpy(X)
    optimizer = torch.optim.Adam(updated.network.parameters(), lr=policy.learning_rate)
    for _ in range(policy.steps):
        optimizer.zero_grad()
        # Полный батч новых запросов на каждом шаге
        loss = qerror_loss(updated(inputs), log_max, labels).mean()
        loss.backward()
        optimizer.step()
    updated.update_steps += policy.steps
    updated.last_update_steps = policy.steps
    logger.debug(f"{model.family}: {policy.steps} шагов обновления на {len(poison)} запросах")
    return updated


def evaluate_estimates(estimates: Sequence[float], truths: Sequence[float]) -> QErrorReport:
    """Сводка Q-error по готовым оценкам и истинным значениям"""
    if len(estimates) == 0:
        raise ModelError("Пустая тестовая нагрузка")
    per_query = [calculate_qerror(float(e), float(t)) for e, t in zip(estimates, truths)]
    return QErrorReport(per_query=per_query, **summarize_qerrors(per_query))


def evaluate(model: CEModel, test: Workload) -> QErrorReport:
    """
    Q-error модели на размеченной тестовой нагрузке

    Args:
        model: CE-модель с контекстом нормализации
        test: Размеченная нагрузка

    Returns:
        QErrorReport (процентили по ближайшему рангу)
    """
    X, _, labels = _labeled_inputs(model, test)
    return evaluate_estimates(estimate_cardinalities(model, X), labels.numpy())
