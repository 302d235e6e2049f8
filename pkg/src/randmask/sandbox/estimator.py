"""scikit-learn wrapper around masked fine-tuning of a pretrained network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from ..exceptions import InvalidInputError
from ..linalg import RngStream
from .model import LayerSpec, MlpModel, attach_peft
from .probes import hessian_spectral_norm
from .tasks import SyntheticTask
from .train import TrainConfig, finetune

_KINDS = {"random-mask": "masked", "structured-mask": "structured", "lora": "lora", "full-ft": "full"}


class RandomMaskingClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tune a frozen pretrained network through a sparse random mask.

    ``fit`` attaches zero-initialized increments to every hidden layer of
    ``pretrained`` (the output head stays frozen) and trains only those.
    Labels must be the integers ``0 .. k-1`` the pretrained head was built
    for.

    Parameters
    ----------
    pretrained : MlpModel
    method : {"random-mask", "structured-mask", "lora", "full-ft"}
    ratio : float
        Trainable fraction of each targeted layer for the masking methods.
    lr, epochs, batch_size, optimizer, weight_decay :
        Forwarded to :class:`TrainConfig`.
    lora_rank, lora_alpha : LoRA shape when ``method="lora"``.
    mask_mode : {"exact-count", "bernoulli"}
    random_state : int
    """

    def __init__(self, pretrained=None, method="random-mask", ratio=0.1, lr=1e-2, epochs=5,
                 batch_size=32, optimizer="adamw", weight_decay=0.0, lora_rank=4,
                 lora_alpha=8.0, mask_mode="exact-count", random_state=0):
        self.pretrained = pretrained
        self.method = method
        self.ratio = ratio
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.mask_mode = mask_mode
        self.random_state = random_state

    def _specs(self, n_layers):
        if self.method not in _KINDS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        kind = LayerSpec(_KINDS[self.method], self.ratio, self.mask_mode,
                         self.lora_rank, self.lora_alpha)
        return [kind] * (n_layers - 1) + [LayerSpec("frozen")]

    def fit(self, X, y):
        if not isinstance(self.pretrained, MlpModel):
            raise InvalidInputError("pretrained must be an MlpModel")
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        n_out = self.pretrained.sizes[-1]
        self.classes_ = np.arange(n_out)
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= n_out:
            raise InvalidInputError(f"labels must lie in 0..{n_out - 1}")
        rng = RngStream(self.random_state)
        self.model_ = attach_peft(self.pretrained, self._specs(len(self.pretrained.weights)),
                                  rng.split(0))
        task = SyntheticTask("fit", X, y, X[:0], y[:0], n_out)
        cfg = TrainConfig(optimizer=self.optimizer, lr=self.lr, epochs=self.epochs,
                          batch_size=self.batch_size, weight_decay=self.weight_decay)
        self.result_ = finetune(self.model_, task, cfg, rng.split(1))
        self.n_trainable_ = self.model_.n_trainable
        self.distance_from_init_ = self.result_.distance_from_init
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        return validate_data(self, X, dtype=np.float64, reset=False)

    def decision_function(self, X):
        return self.model_.forward(self._check(X))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def hessian_norm(self, X, y, iters=100, tol=1e-6):
        """Curvature of the training loss at the fitted increments."""
        X = self._check(X)
        return hessian_spectral_norm(self.model_, (X, np.asarray(y)), iters, tol,
                                     RngStream(self.random_state).split(2)).value
