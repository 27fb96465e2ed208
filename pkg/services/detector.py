"""
Детектор аномальных запросов на основе вариационного автокодировщика
"""

import logging
import math
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from config import DETECTOR_CONFIG, SHOW_PROGRESS
from services.querylang import QueryEncoding
from utils.error_handler import ConfigurationError, DimensionMismatchError, ModelError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


class QueryVAE(nn.Module):
    """Кодировщик из 4 слоёв и декодер из 3 слоёв с сигмоидой на выходе"""

    def __init__(self, input_dim: int, latent_dim: int, hidden_dims: Sequence[int]):
        super().__init__()
        self.latent_dim = latent_dim
        encoder: List[nn.Module] = []
        widths = [input_dim] + list(hidden_dims)
        for a, b in zip(widths[:-1], widths[1:]):
            encoder += [nn.Linear(a, b), nn.ReLU()]
        # Последний слой кодировщика: среднее и лог-дисперсия
        encoder.append(nn.Linear(widths[-1], 2 * latent_dim))
        self.encoder = nn.Sequential(*encoder)

        decoder: List[nn.Module] = []
        # Декодер зеркален кодировщику без первого скрытого слоя
        widths = [latent_dim] + list(reversed(hidden_dims))[:-1]
        for a, b in zip(widths[:-1], widths[1:]):
            decoder += [nn.Linear(a, b), nn.ReLU()]
        decoder += [nn.Linear(widths[-1], input_dim), nn.Sigmoid()]
        self.decoder = nn.Sequential(*decoder)

    def encode(self, x: torch.Tensor):
        mu, logvar = self.encoder(x).chunk(2, dim=-1)
        return mu, logvar

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Детерминированная реконструкция через среднее латентного распределения"""
        mu, _ = self.encode(x)
        return self.decoder(mu)

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        mu, logvar = self.encode(x)
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        # Трюк репараметризации
        z = mu + noise * torch.exp(0.5 * logvar)
        return self.decoder(z), mu, logvar


class Detector:
    """Обученный детектор: сеть реконструкции и порог epsilon"""

    def __init__(self, network: nn.Module, input_dim: int, epsilon: float = DETECTOR_CONFIG['epsilon'],
                 latent_dim: Optional[int] = None, seed: int = 0):
        self.network = network
        self.input_dim = input_dim
        self.epsilon = epsilon
        self.latent_dim = latent_dim
        self.seed = seed
        self.beta = DETECTOR_CONFIG['beta']
        self.hidden_dims = tuple(DETECTOR_CONFIG['hidden_dims'])
        self.training_curve: List[float] = []

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatchError(f"Детектор ожидает размерность {self.input_dim}, получено {x.shape[-1]}")
        return self.network.reconstruct(x)

    def parameter_vector(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.network.parameters()).detach().numpy().copy()


def _as_matrix(xs: Union[np.ndarray, Sequence[QueryEncoding], Sequence[Sequence[float]]]) -> np.ndarray:
    if isinstance(xs, np.ndarray):
        return np.atleast_2d(xs.astype(np.float64))
    rows = [x.x if isinstance(x, QueryEncoding) else np.asarray(x, dtype=np.float64) for x in xs]
    if not rows:
        return np.zeros((0, 0))
    return np.stack(rows)


def _vae_loss(network: QueryVAE, x: torch.Tensor, beta: float,
              generator: Optional[torch.Generator]) -> torch.Tensor:
    if generator is None:
        mu, logvar = network.encode(x)
        recon = network.decoder(mu)
    else:
        recon, mu, logvar = network(x, generator)
    mse = ((recon - x) ** 2).mean()
    # KL до стандартного нормального
    kl = (-0.5 * (1 + logvar - mu ** 2 - logvar.exp()).sum(dim=1)).mean()
    return mse + beta * kl


def train_detector(
    historical: Union[np.ndarray, Sequence[QueryEncoding]],
    epochs: int = DETECTOR_CONFIG['epochs'],
    lr: float = DETECTOR_CONFIG['lr'],
    seed: int = 0,
    beta: float = DETECTOR_CONFIG['beta'],
    batch_size: int = DETECTOR_CONFIG['batch_size'],
    epsilon: float = DETECTOR_CONFIG['epsilon'],
    latent_dim: Optional[int] = DETECTOR_CONFIG['latent_dim'],
) -> Detector:
    """
    Обучение VAE на исторических запросах

    Args:
        historical: Кодирования исторической нагрузки
        epochs: Число эпох
        lr: Скорость обучения Adam
        seed: Зерно инициализации, перемешивания и шума
        beta: Вес KL-регуляризатора
        batch_size: Размер мини-батча
        epsilon: Порог аномальности
        latent_dim: Размерность латентного пространства (None = ceil(d / 2))

    Returns:
        Обученный Detector; training_curve[0] - потеря до обучения
    """
    X = _as_matrix(historical)
    if X.shape[0] == 0:
        raise ModelError("Пустая историческая нагрузка для детектора")
    if epsilon < 0:
        raise ConfigurationError(f"epsilon должен быть >= 0: {epsilon}")
    input_dim = X.shape[1]
    # По умолчанию латентное пространство вдвое уже входа
    latent_dim = latent_dim or int(math.ceil(input_dim / 2))
    hidden_dims = tuple(DETECTOR_CONFIG['hidden_dims'])

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        network = QueryVAE(input_dim, latent_dim, hidden_dims).to(DTYPE)
    detector = Detector(network, input_dim, epsilon, latent_dim, seed)
    detector.beta = beta

    inputs = torch.from_numpy(np.ascontiguousarray(X))
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(network.parameters(), lr=lr)
    with torch.no_grad():
        # Потеря до обучения - нулевая точка кривой
        curve = [float(_vae_loss(network, inputs, beta, None))]
    for epoch in tqdm(range(epochs), desc='detector', disable=not SHOW_PROGRESS, leave=False):
        # Перемешиваем историческую нагрузку каждую эпоху
        order = torch.randperm(inputs.shape[0], generator=generator)
        for start in range(0, inputs.shape[0], batch_size):
            batch = inputs[order[start:start + batch_size]]
            optimizer.zero_grad()
            loss = _vae_loss(network, batch, beta, generator)
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            curve.append(float(_vae_loss(network, inputs, beta, None)))
        logger.debug(f"Детектор: эпоха {epoch + 1}/{epochs}, потеря {curve[-1]:.5f}")
    detector.training_curve = curve
    logger.info(f"Детектор обучен на {X.shape[0]} запросах: потеря {curve[0]:.4f} -> {curve[-1]:.4f}")
    return detector


def reconstruction_errors(d: Detector, X: Union[np.ndarray, Sequence[QueryEncoding]]) -> np.ndarray:
    """Средняя абсолютная ошибка реконструкции по измерениям для каждой строки"""
    X = _as_matrix(X)
    if X.shape[0] == 0:
        return np.zeros(0)
    inputs = torch.from_numpy(np.ascontiguousarray(X))
    with torch.no_grad():
        recon = d.reconstruct(inputs)
    # Средняя абсолютная ошибка по измерениям
    return (recon - inputs).abs().mean(dim=1).numpy().copy()


def reconstruction_error(d: Detector, x: Union[QueryEncoding, Sequence[float]]) -> float:
    """Ошибка реконструкции одного кодирования"""
    vector = x.x if isinstance(x, QueryEncoding) else np.asarray(x, dtype=np.float64)
    return float(reconstruction_errors(d, vector[None, :])[0])


def is_abnormal(d: Detector, x: Union[QueryEncoding, Sequence[float]], epsilon: Optional[float] = None) -> bool:
    """Ошибка реконструкции строго больше порога"""
    epsilon = d.epsilon if epsilon is None else epsilon
    return reconstruction_error(d, x) > epsilon


def abnormal_mask(d: Detector, X: np.ndarray, epsilon: Optional[float] = None) -> np.ndarray:
    epsilon = d.epsilon if epsilon is None else epsilon
    return reconstruction_errors(d, X) > epsilon


def reconstruction_loss(d: Detector, xs: torch.Tensor) -> torch.Tensor:
    """
    Среднеквадратичная ошибка реконструкции, дифференцируемая по входам и параметрам

    Args:
        d: Детектор
        xs: Тензор N x d (может требовать градиента)

    Returns:
        Скаляр: среднее по строкам от среднего квадрата ошибки по измерениям
    """
    if xs.dim() == 1:
        xs = xs.unsqueeze(0)
    if xs.shape[0] == 0:
        raise ModelError("Пустой набор для потери реконструкции")
    recon = d.reconstruct(xs)
    return ((recon - xs) ** 2).mean(dim=1).mean()


def score_workload(d: Detector, X: np.ndarray, epsilon: Optional[float] = None) -> pd.DataFrame:
    """Таблица ошибок реконструкции и флагов аномальности по запросам"""
    epsilon = d.epsilon if epsilon is None else epsilon
    errors = reconstruction_errors(d, X)
    return pd.DataFrame({
        'query': np.arange(errors.size),
        'reconstruction_error': errors,
        'abnormal': errors > epsilon,
    })
