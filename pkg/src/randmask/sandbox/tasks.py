"""Seeded synthetic tasks for pretraining and fine-tuning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import InvalidInputError
from ..linalg import RngStream

TRAIN_STREAM = 1
TEST_STREAM = 2


@dataclass
class SyntheticTask:
    name: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int = 0   # 0 for regression

    @property
    def input_dim(self) -> int:
        return self.X_train.shape[1]

    @property
    def train(self):
        return self.X_train, self.y_train

    @property
    def test(self):
        return self.X_test, self.y_test


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian mixture: class means plus a shared anisotropic noise factor."""

    means: np.ndarray      # (classes, dim)
    factor: np.ndarray     # noise = z @ factor.T

    def sample(self, count: int, rng: RngStream):
        classes, dim = self.means.shape
        labels = np.arange(count) % classes
        labels = labels[rng.permutation(count)]
        X = self.means[labels] + rng.normal((count, dim)) @ self.factor.T
        return X, labels


def _rotation(dim, angle, rng):
    """Cayley rotation ``(I - K)^-1 (I + K)``, ``K = (angle/2) S`` for a random unit skew ``S``."""
    G = rng.normal((dim, dim))
    S = G - G.T
    S /= np.linalg.norm(S, 2)
    K = 0.5 * angle * S
    eye = np.eye(dim)
    return np.linalg.solve(eye - K, eye + K)


def _draw(spec: MixtureSpec, name, n_train, n_test, rng):
    X_tr, y_tr = spec.sample(n_train, rng.split(TRAIN_STREAM))
    X_te, y_te = spec.sample(n_test, rng.split(TEST_STREAM))
    return SyntheticTask(name, X_tr, y_tr, X_te, y_te, spec.means.shape[0])


def gaussian_mixture_pair(
    dim: int = 16,
    n_classes: int = 4,
    n_train: int = 512,
    n_test: int = 2048,
    seed: int = 0,
    separation: float = 2.0,
    shift: float = 1.0,
    rotation: float = 0.5,
    anisotropy: float = 0.5,
):
    """Base task and a related target task.

    The target moves each class mean by ``shift`` times a random Gaussian
    vector (scaled like the means) and rotates the noise covariance by an
    angle of about ``rotation`` radians. Train and test splits use disjoint
    streams.
    """
    if dim < 1 or n_classes < 2:
        raise InvalidInputError("need dim >= 1 and at least two classes")
    rng = RngStream(seed)
    gen = rng.split(0)
    scale = separation / np.sqrt(dim)
    means = scale * gen.normal((n_classes, dim))
    stds = np.linspace(1.0 - anisotropy, 1.0 + anisotropy, dim)
    base = MixtureSpec(means, np.diag(stds))
    target_means = means + shift * scale * gen.normal((n_classes, dim))
    R = _rotation(dim, rotation, gen)
    target = MixtureSpec(target_means, R @ np.diag(stds))
    return (
        _draw(base, "base", n_train, n_test, rng.split(10)),
        _draw(target, "target", n_train, n_test, rng.split(20)),
    )


def linear_regression_task(n: int, dim: int, seed: int = 0, noise: float = 0.1, n_test: int = 0):
    """Gaussian features with linear targets; ``n_classes`` is 0."""
    rng = RngStream(seed)
    w = rng.split(0).normal(dim)
    X = rng.split(TRAIN_STREAM).normal((n, dim))
    y = X @ w + noise * rng.split(3).normal(n)
    X_te = rng.split(TEST_STREAM).normal((n_test, dim))
    y_te = X_te @ w + noise * rng.split(4).normal(n_test)
    return SyntheticTask("linear", X, y, X_te, y_te, 0)
