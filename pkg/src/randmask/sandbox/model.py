"""Small feed-forward networks with pluggable trainable increments.

Weights are stored as ``(fan_in, fan_out)`` matrices and a layer computes
``h @ (W + delta) + b``. Each layer carries an adapter that defines which
increment ``delta`` is trainable: nothing, the whole matrix, a sparse
masked subset, or a LoRA factorization. Backpropagation is written out by
hand for this fixed family.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..exceptions import InvalidInputError
from ..linalg import RngStream
from ..masking import Mask, SparseUpdate, gen_random_mask, gen_structured_mask, scatter_grad

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("xent", "mse")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, h):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - h**2
    return np.ones_like(z)


@dataclass(frozen=True)
class LayerSpec:
    """How one layer is fine-tuned.

    ``kind`` is one of ``frozen``, ``full``, ``masked``, ``structured`` or
    ``lora``. ``p`` and ``mode`` apply to the masked kinds; ``rank`` and
    ``alpha`` to LoRA.
    """

    kind: str = "frozen"
    p: float = 1.0
    mode: str = "exact-count"
    rank: int = 8
    alpha: float = 16.0

    @classmethod
    def parse(cls, spec) -> "LayerSpec":
        if isinstance(spec, LayerSpec):
            return spec
        if isinstance(spec, str):
            return cls(kind=spec)
        if isinstance(spec, dict):
            return cls(**spec)
        raise InvalidInputError(f"cannot interpret layer spec {spec!r}")


class FullAdapter:
    kind = "full"

    def __init__(self, shape):
        self.shape = tuple(shape)
        self.theta = np.zeros(int(np.prod(self.shape)))

    def delta(self):
        return self.theta.reshape(self.shape)

    def grad(self, dW):
        return dW.reshape(-1).copy()

    def to_dict(self):
        return {"kind": self.kind, "shape": list(self.shape), "theta": self.theta.tolist()}


class MaskAdapter:
    """Sparse increment on a fixed mask; ``theta`` aliases the update values."""

    kind = "masked"

    def __init__(self, mask: Mask):
        self.update = SparseUpdate(mask)
        self.shape = mask.shape

    @property
    def theta(self):
        return self.update.values

    @theta.setter
    def theta(self, value):
        self.update.values = value

    def delta(self):
        return self.update.dense()

    def grad(self, dW):
        return scatter_grad(dW, self.update.mask)

    def to_dict(self):
        return {"kind": self.kind, "mask": self.update.mask.to_dict(), "theta": self.theta.tolist()}


class LoraAdapter:
    """``delta = (alpha / rank) * A @ B`` with ``B`` zero at initialization."""

    kind = "lora"

    def __init__(self, shape, rank, alpha, rng: RngStream):
        fan_in, fan_out = shape
        self.shape = tuple(shape)
        self.rank = int(rank)
        self.alpha = float(alpha)
        a = rng.normal((fan_in, self.rank)) / np.sqrt(fan_in)
        self.theta = np.concatenate([a.ravel(), np.zeros(self.rank * fan_out)])

    @property
    def scale(self):
        return self.alpha / self.rank

    def _split(self):
        fan_in, fan_out = self.shape
        k = fan_in * self.rank
        return self.theta[:k].reshape(fan_in, self.rank), self.theta[k:].reshape(self.rank, fan_out)

    def delta(self):
        A, B = self._split()
        return self.scale * (A @ B)

    def grad(self, dW):
        A, B = self._split()
        return np.concatenate([(self.scale * dW @ B.T).ravel(), (self.scale * A.T @ dW).ravel()])

    def to_dict(self):
        return {"kind": self.kind, "shape": list(self.shape), "rank": self.rank,
                "alpha": self.alpha, "theta": self.theta.tolist()}


def make_adapter(spec: LayerSpec, shape, rng: RngStream):
    if spec.kind == "frozen":
        return None
    if spec.kind == "full":
        return FullAdapter(shape)
    if spec.kind == "masked":
        return MaskAdapter(gen_random_mask(shape, spec.p, spec.mode, rng))
    if spec.kind == "structured":
        return MaskAdapter(gen_structured_mask(shape, spec.p, rng))
    if spec.kind == "lora":
        if spec.rank < 1 or spec.rank > min(shape):
            raise InvalidInputError(f"LoRA rank {spec.rank} invalid for layer {shape}")
        return LoraAdapter(shape, spec.rank, spec.alpha, rng)
    raise InvalidInputError(f"unknown layer kind {spec.kind!r}")


class MlpModel:
    """Dense network ``x -> act(x W1 + b1) -> ... -> x Wk + bk``.

    ``loss`` is softmax cross-entropy (``xent``, integer labels) or half mean
    squared error (``mse``).
    """

    def __init__(self, weights, biases, activation="relu", loss="xent"):
        if activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {activation!r}")
        if loss not in LOSSES:
            raise InvalidInputError(f"unknown loss {loss!r}")
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[1],):
                raise InvalidInputError(f"layer {i}: bias shape {b.shape} vs weight {W.shape}")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise InvalidInputError(f"layer {i} input does not chain with layer {i - 1}")
        self.activation = activation
        self.loss = loss
        self.adapters = [None] * len(self.weights)
        self.trained = False

    @classmethod
    def init(cls, sizes, rng: RngStream, activation="relu", loss="xent"):
        """Random initialization for layer widths ``sizes`` (input first)."""
        weights, biases = [], []
        gain = 2.0 if activation == "relu" else 1.0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal((fan_in, fan_out)) * np.sqrt(gain / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation, loss)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    # -- trainable increments -------------------------------------------------

    @property
    def n_trainable(self) -> int:
        return sum(a.theta.size for a in self.adapters if a is not None)

    def get_theta(self) -> np.ndarray:
        parts = [a.theta for a in self.adapters if a is not None]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_theta(self, theta) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_trainable:
            raise InvalidInputError(f"{theta.size} values for {self.n_trainable} trainable params")
        offset = 0
        for a in self.adapters:
            if a is None:
                continue
            k = a.theta.size
            a.theta = theta[offset:offset + k].copy()
            offset += k

    def effective_weights(self):
        return [W if a is None else W + a.delta() for W, a in zip(self.weights, self.adapters)]

    # -- evaluation -------------------------------------------------------------

    def _forward(self, X, weights):
        zs, hs = [], [X]
        h = X
        last = len(weights) - 1
        for i, (W, b) in enumerate(zip(weights, self.biases)):
            z = h @ W + b
            h = z if i == last else _act(self.activation, z)
            zs.append(z)
            hs.append(h)
        return zs, hs

    def forward(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self._forward(X, self.effective_weights())[1][-1]

    def _loss_and_dout(self, out, y):
        n = out.shape[0]
        if self.loss == "xent":
            shifted = out - out.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            y = np.asarray(y, dtype=np.int64)
            loss = -float(np.mean(logp[np.arange(n), y]))
            dout = np.exp(logp)
            dout[np.arange(n), y] -= 1.0
            return loss, dout / n
        target = np.asarray(y, dtype=np.float64).reshape(out.shape)
        diff = out - target
        return 0.5 * float(np.sum(diff**2)) / n, diff / n

    def evaluate_loss(self, X, y) -> float:
        return self._loss_and_dout(self.forward(X), y)[0]

    def backprop(self, X, y, weights=None):
        """Loss and gradients with respect to every effective weight and bias."""
        X = np.asarray(X, dtype=np.float64)
        weights = self.effective_weights() if weights is None else weights
        zs, hs = self._forward(X, weights)
        loss, delta = self._loss_and_dout(hs[-1], y)
        dWs = [None] * len(weights)
        dbs = [None] * len(weights)
        for i in range(len(weights) - 1, -1, -1):
            dWs[i] = hs[i].T @ delta
            dbs[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ weights[i].T) * _act_grad(self.activation, zs[i - 1], hs[i])
        return loss, dWs, dbs

    def loss_grad(self, X, y, theta=None):
        """Loss and gradient over the trainable increments.

        Gradient mass at frozen coordinates is dropped here: masked layers
        keep only their selected cells.
        """
        if theta is not None:
            saved = self.get_theta()
            self.set_theta(theta)
        try:
            loss, dWs, _ = self.backprop(X, y)
            parts = [a.grad(dW) for a, dW in zip(self.adapters, dWs) if a is not None]
        finally:
            if theta is not None:
                self.set_theta(saved)
        return loss, (np.concatenate(parts) if parts else np.zeros(0))

    def base_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def set_base_params(self, theta) -> None:
        offset = 0
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[offset:offset + W.size].reshape(W.shape).copy()
            offset += W.size
            self.biases[i] = theta[offset:offset + b.size].copy()
            offset += b.size

    def base_loss_grad(self, X, y):
        """Loss and gradient over all base weights and biases (pretraining)."""
        loss, dWs, dbs = self.backprop(X, y, self.weights)
        return loss, np.concatenate([g.ravel() for pair in zip(dWs, dbs) for g in pair])

    def predict(self, X) -> np.ndarray:
        out = self.forward(X)
        if self.loss == "xent":
            return np.argmax(out, axis=1)
        return out

    def accuracy(self, X, y) -> float:
        if len(X) == 0:
            return float("nan")
        out = self.forward(X)
        if not np.all(np.isfinite(out)):
            return 0.0
        return float(np.mean(np.argmax(out, axis=1) == np.asarray(y)))

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "loss": self.loss,
            "trained": self.trained,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "adapters": [None if a is None else a.to_dict() for a in self.adapters],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "MlpModel":
        model = cls([np.array(W) for W in record["weights"]],
                    [np.array(b) for b in record["biases"]],
                    record["activation"], record["loss"])
        model.trained = record.get("trained", False)
        for i, rec in enumerate(record.get("adapters") or []):
            if rec is None:
                continue
            if rec["kind"] == "full":
                a = FullAdapter(rec["shape"])
            elif rec["kind"] == "masked":
                a = MaskAdapter(Mask.from_dict(rec["mask"]))
            else:
                a = LoraAdapter(rec["shape"], rec["rank"], rec["alpha"], RngStream(0))
            a.theta = np.array(rec["theta"], dtype=np.float64)
            model.adapters[i] = a
        return model


def attach_peft(model: MlpModel, spec, rng: RngStream) -> MlpModel:
    """Copy of ``model`` with base weights frozen and zero increments installed.

    ``spec`` has one entry per layer (a :class:`LayerSpec`, a kind string or
    a dict). Layer ``i`` draws its mask or LoRA factors from ``rng.split(i)``.
    """
    specs = [LayerSpec.parse(s) for s in spec]
    if len(specs) != len(model.weights):
        raise InvalidInputError(f"spec has {len(specs)} entries for {len(model.weights)} layers")
    out = model.copy()
    out.adapters = [make_adapter(s, W.shape, rng.split(i))
                    for i, (s, W) in enumerate(zip(specs, model.weights))]
    return out
