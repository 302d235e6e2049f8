"""Pretraining and parameter-efficient fine-tuning loops."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..exceptions import InvalidInputError, NumericError, PretrainingFailedError
from ..linalg import RngStream
from .model import MlpModel
from .tasks import SyntheticTask

OPTIMIZERS = ("sgd", "adamw")


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    constant_schedule: bool = True  # False: linear decay to zero
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise InvalidInputError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


class Sgd:
    def __init__(self, cfg: TrainConfig, size: int):
        self.cfg = cfg

    def step(self, theta, grad, lr):
        return theta - lr * grad


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, cfg: TrainConfig, size: int):
        self.cfg = cfg
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad, lr):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad**2
        m_hat = self.m / (1 - c.beta1**self.t)
        v_hat = self.v / (1 - c.beta2**self.t)
        return theta - lr * (m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * theta)


def make_optimizer(cfg: TrainConfig, size: int):
    return (AdamW if cfg.optimizer == "adamw" else Sgd)(cfg, size)


@dataclass
class _LoopResult:
    theta: np.ndarray
    initial_loss: float
    final_loss: float
    diverged: bool
    steps: int
    epochs_run: int
    reached: bool


def _optimize(theta, loss_grad, full_loss, n, cfg: TrainConfig, rng: RngStream,
              after_epoch=None, stop_at_loss=None) -> _LoopResult:
    """Minibatch loop shared by pretraining and fine-tuning.

    Epoch ``e`` visits the data in the order ``rng.split(e).permutation(n)``,
    so a run of ``k`` epochs is a prefix of any longer run with the same
    stream.
    """
    initial = full_loss(theta)
    if not math.isfinite(initial):
        raise NumericError("non-finite loss at step 0")
    opt = make_optimizer(cfg, theta.size)
    batches = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * batches
    loss = initial
    steps = 0
    diverged = False
    reached = stop_at_loss is not None and loss <= stop_at_loss
    epoch = 0
    if theta.size == 0 or reached:
        return _LoopResult(theta, initial, loss, False, 0, 0, reached)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.split(epoch - 1).permutation(n)
        for b in range(batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch_loss, grad = loss_grad(theta, idx)
            if not (math.isfinite(batch_loss) and np.all(np.isfinite(grad))):
                diverged = True
                break
            lr = cfg.lr if cfg.constant_schedule else cfg.lr * (1.0 - steps / total)
            theta = opt.step(theta, grad, lr)
            steps += 1
            if stop_at_loss is not None:
                loss = full_loss(theta)
                if loss <= stop_at_loss:
                    reached = True
                    break
        if diverged or reached:
            break
        loss = full_loss(theta)
        if not math.isfinite(loss) or loss > cfg.divergence_factor * initial:
            diverged = True
            break
        if after_epoch is not None and after_epoch(theta, epoch):
            break
    if diverged or stop_at_loss is None:
        loss = full_loss(theta)
    return _LoopResult(theta, initial, loss, diverged, steps, epoch, reached)


def pretrain(task: SyntheticTask, hidden=(64,), cfg: TrainConfig | None = None,
             rng: RngStream | None = None, activation="relu",
             target_accuracy=0.95, min_accuracy=0.6) -> MlpModel:
    """Train every weight and bias of a fresh network on ``task``.

    Stops at the first epoch whose train accuracy reaches
    ``target_accuracy``. With ``cfg.epochs == 0`` the initialized network is
    returned with ``trained = False``.
    """
    cfg = cfg or TrainConfig(lr=1e-2, epochs=200)
    rng = rng if rng is not None else RngStream(0)
    loss = "xent" if task.n_classes else "mse"
    out_dim = task.n_classes if task.n_classes else 1
    model = MlpModel.init([task.input_dim, *hidden, out_dim], rng.split(0), activation, loss)
    if cfg.epochs == 0:
        return model
    X, y = task.train

    def loss_grad(theta, idx):
        model.set_base_params(theta)
        return model.base_loss_grad(X[idx], y[idx])

    def full_loss(theta):
        model.set_base_params(theta)
        return model.evaluate_loss(X, y)

    def after_epoch(theta, epoch):
        model.set_base_params(theta)
        return task.n_classes and model.accuracy(X, y) >= target_accuracy

    result = _optimize(model.base_params(), loss_grad, full_loss, len(X), cfg, rng.split(1),
                       after_epoch)
    model.set_base_params(result.theta)
    if task.n_classes:
        acc = model.accuracy(X, y)
        if result.diverged or acc < min_accuracy:
            raise PretrainingFailedError(f"pretraining reached only {acc:.3f} train accuracy")
    model.trained = True
    return model


@dataclass
class FinetuneResult:
    train_accuracy: float
    test_accuracy: float
    final_loss: float
    initial_loss: float
    diverged: bool
    distance_from_init: float
    steps: int
    epochs_run: int
    reached_target: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def finetune(model: MlpModel, task: SyntheticTask, cfg: TrainConfig, rng: RngStream,
             stop_at_loss: float | None = None) -> FinetuneResult:
    """Optimize the model's trainable increments in place.

    Base weights are never written. ``distance_from_init`` is the l2 distance
    between the initial and final trainable parameter vectors. With
    ``stop_at_loss`` the full train loss is checked after every step and
    training halts once it drops to that level.
    """
    X, y = task.train
    theta0 = model.get_theta()

    def loss_grad(theta, idx):
        return model.loss_grad(X[idx], y[idx], theta)

    def full_loss(theta):
        model.set_theta(theta)
        return model.evaluate_loss(X, y)

    result = _optimize(theta0.copy(), loss_grad, full_loss, len(X), cfg, rng, None, stop_at_loss)
    model.set_theta(result.theta)
    dist = float(np.linalg.norm(result.theta - theta0))
    return FinetuneResult(
        train_accuracy=model.accuracy(X, y) if task.n_classes else math.nan,
        test_accuracy=model.accuracy(*task.test) if task.n_classes else math.nan,
        final_loss=result.final_loss,
        initial_loss=result.initial_loss,
        diverged=result.diverged,
        distance_from_init=dist if math.isfinite(dist) else math.inf,
        steps=result.steps,
        epochs_run=result.epochs_run,
        reached_target=result.reached,
    )
