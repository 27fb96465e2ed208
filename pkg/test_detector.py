#!/usr/bin/env python3
"""
Тесты детектора аномалий: обучение, ошибка реконструкции, порог и градиенты
"""

import math
import os
import sys
from dataclasses import replace

import numpy as np
import pytest
import torch
from torch import nn

# Добавляем текущую директорию в path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from services.detector import (
    Detector,
    abnormal_mask,
    is_abnormal,
    reconstruction_error,
    reconstruction_errors,
    reconstruction_loss,
    score_workload,
    train_detector,
)
from services.harness import Experiment, ExperimentConfig
from services.querylang import encode_workload
from utils.error_handler import ConfigurationError, DimensionMismatchError, ModelError


class ShiftNetwork(nn.Module):
    """Заглушка: реконструкция со сдвигом на shift"""

    def __init__(self, shift: float = 0.0):
        super().__init__()
        self.shift = shift

    def reconstruct(self, x):
        return x + self.shift


@pytest.fixture(scope='module')
def historical(single_db, single_train):
    return encode_workload(single_train, single_db.schema)


@pytest.fixture(scope='module')
def detector(historical):
    return train_detector(historical[:250], epochs=25, seed=3)


def test_training_reduces_loss_and_is_deterministic(historical, detector):
    assert detector.training_curve[-1] < detector.training_curve[0]
    assert len(detector.training_curve) == 26
    again = train_detector(historical[:250], epochs=25, seed=3)
    assert np.array_equal(again.parameter_vector(), detector.parameter_vector())


def test_detector_has_seven_linear_layers(detector):
    linear = [m for m in detector.network.modules() if isinstance(m, nn.Linear)]
    assert len(linear) == 7
    assert detector.latent_dim == math.ceil(detector.input_dim / 2)


def test_training_errors():
    with pytest.raises(ModelError):
        train_detector(np.zeros((0, 4)))
    with pytest.raises(ConfigurationError):
        train_detector(np.zeros((3, 4)), epsilon=-1.0)


def test_historical_queries_reconstruct_better_than_random(historical, detector):
    held_out = reconstruction_errors(detector, historical[250:])
    noise = reconstruction_errors(detector, np.random.default_rng(0).uniform(size=(50, historical.shape[1])))
    assert held_out.mean() < noise.mean(), "❌ Детектор не отличает исторические запросы от шума"


def test_identity_stub_has_zero_error():
    d = Detector(ShiftNetwork(), input_dim=5, epsilon=0.05)
    x = np.random.default_rng(1).uniform(size=5)
    assert reconstruction_error(d, x) == 0.0
    assert not is_abnormal(d, x)
    assert not is_abnormal(d, x, epsilon=0.0)


def test_threshold_rule():
    """Ошибка 0.15 при пороге 0.1 - аномалия"""
    d = Detector(ShiftNetwork(0.15), input_dim=4, epsilon=0.1)
    x = np.full(4, 0.5)
    assert reconstruction_error(d, x) == pytest.approx(0.15)
    assert is_abnormal(d, x)
    assert not is_abnormal(d, x, epsilon=math.inf)
    assert is_abnormal(d, x, epsilon=0.0)


def test_abnormal_set_shrinks_with_epsilon(historical, detector):
    X = np.vstack([historical[250:], np.random.default_rng(2).uniform(size=(30, historical.shape[1]))])
    sizes = [int(abnormal_mask(detector, X, eps).sum()) for eps in (0.0, 0.02, 0.05, 0.1, 0.3, 1.0)]
    assert sizes == sorted(sizes, reverse=True)


def test_reconstruction_error_is_nonnegative_and_continuous(historical, detector):
    x = historical[0].copy()
    base = reconstruction_error(detector, x)
    assert base >= 0.0
    x[-1] -= 1e-7
    assert abs(reconstruction_error(detector, x) - base) < 1e-5


def test_dimension_mismatch(detector):
    with pytest.raises(DimensionMismatchError):
        reconstruction_error(detector, np.zeros(detector.input_dim + 2))


def test_reconstruction_loss_is_mean_of_single_losses(historical, detector):
    xs = torch.from_numpy(historical[:6])
    total = reconstruction_loss(detector, xs).detach().item()
    singles = [reconstruction_loss(detector, xs[i]).detach().item() for i in range(6)]
    assert total == pytest.approx(np.mean(singles), rel=1e-10)
    with pytest.raises(ModelError):
        reconstruction_loss(detector, xs[:0])
    assert reconstruction_loss(Detector(ShiftNetwork(), input_dim=xs.shape[1]), xs).detach().item() == 0.0


def test_reconstruction_loss_input_gradient(historical, detector):
    """Градиент по входам против центральных разностей"""
    xs = torch.from_numpy(historical[:4].copy()).requires_grad_(True)
    grad = torch.autograd.grad(reconstruction_loss(detector, xs), xs)[0]
    eps = 1e-6
    rng = np.random.default_rng(5)
    for _ in range(6):
        i, j = int(rng.integers(4)), int(rng.integers(xs.shape[1]))
        shifted = xs.detach().clone()
        shifted[i, j] += eps
        plus = reconstruction_loss(detector, shifted).detach().item()
        shifted[i, j] -= 2 * eps
        minus = reconstruction_loss(detector, shifted).detach().item()
        numeric = (plus - minus) / (2 * eps)
        analytic = float(grad[i, j])
        assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic), 1e-4)


def test_score_workload_table(historical, detector):
    table = score_workload(detector, historical[:10])
    assert list(table.columns) == ['query', 'reconstruction_error', 'abnormal']
    assert len(table) == 10
    assert table['abnormal'].tolist() == (table['reconstruction_error'] > detector.epsilon).tolist()


@pytest.mark.slow
def test_detector_naive_poison_is_flagged_more_often():
    """Генератор, обученный без детектора, чаще превышает порог, чем чистые запросы"""
    cfg = ExperimentConfig.from_dict({'surrogate_family': 'FCN', 'use_detector': False})
    experiment = Experiment(cfg)
    schema = experiment.data().schema
    poison = encode_workload(experiment.poison('pace'), schema)
    watcher = experiment.fork(replace(cfg, use_detector=True)).detector()
    clean = encode_workload(experiment.workloads()['test'], schema)
    poison_rate = abnormal_mask(watcher, poison).mean()
    clean_rate = abnormal_mask(watcher, clean).mean()
    assert poison_rate > clean_rate, f"❌ Доля аномальных: отравление {poison_rate:.2f}, чистые {clean_rate:.2f}"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
