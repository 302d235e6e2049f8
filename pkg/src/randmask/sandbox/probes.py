"""Curvature, distance and training-budget probes for fine-tuned networks."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..linalg import PowerEstimate, RngStream, power_method_norm
from .model import MlpModel
from .tasks import SyntheticTask
from .train import TrainConfig, finetune

_SQRT_EPS = float(np.sqrt(np.finfo(np.float64).eps))


def _data(data):
    if isinstance(data, SyntheticTask):
        return data.train
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y)


def hvp(model: MlpModel, X, y, v, theta=None) -> np.ndarray:
    """Hessian-vector product over trainable coordinates by central differences.

    Step ``eps = sqrt(machine eps) * (1 + ||theta||) / ||v||``.
    """
    theta = model.get_theta() if theta is None else theta
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros_like(v)
    eps = _SQRT_EPS * (1.0 + np.linalg.norm(theta)) / nv
    _, g_plus = model.loss_grad(X, y, theta + eps * v)
    _, g_minus = model.loss_grad(X, y, theta - eps * v)
    return (g_plus - g_minus) / (2.0 * eps)


def hessian_spectral_norm(model: MlpModel, data, iters: int = 100, tol: float = 1e-6,
                          rng: RngStream | None = None) -> PowerEstimate:
    """Power-method estimate of ``||H||_2`` restricted to trainable coordinates.

    ``data`` is a task (its train split is used) or an ``(X, y)`` pair.
    """
    X, y = _data(data)
    dim = model.n_trainable
    if dim == 0:
        return PowerEstimate(0.0, True, 0)
    theta = model.get_theta()
    return power_method_norm(lambda v: hvp(model, X, y, v, theta), dim, iters, tol, rng)


@dataclass
class CurvePoint:
    epochs: int
    train_accuracy: float
    test_accuracy: float
    final_loss: float
    distance_from_init: float

    def to_dict(self):
        return asdict(self)


def longer_training_probe(model: MlpModel, task: SyntheticTask, small_lr: float, epoch_grid,
                          rng: RngStream, cfg: TrainConfig | None = None) -> list[CurvePoint]:
    """Fine-tune fresh copies of ``model`` for each epoch budget at ``small_lr``.

    Every run starts from the same increments and consumes the same stream.
    """
    grid = [int(e) for e in epoch_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("epoch_grid must be ascending")
    cfg = (cfg or TrainConfig()).replace(lr=small_lr)
    curve = []
    for epochs in grid:
        run = model.copy()
        res = finetune(run, task, cfg.replace(epochs=epochs), RngStream(rng.seed, rng.stream_id))
        curve.append(CurvePoint(epochs, res.train_accuracy, res.test_accuracy,
                                res.final_loss, res.distance_from_init))
    return curve


def distance_at_loss(model: MlpModel, task: SyntheticTask, cfg: TrainConfig, target_loss: float,
                     rng: RngStream):
    """Distance travelled when the train loss first reaches ``target_loss``.

    Trains a copy of ``model``; returns the fine-tuning result, whose
    ``reached_target`` tells whether the level was hit within the budget.
    """
    run = model.copy()
    return finetune(run, task, cfg, rng, stop_at_loss=target_loss)
