"""Random and structured parameter masks, and sparse increments over them.

A :class:`Mask` stores the trainable cells of a tensor as sorted row-major
flat indices. A :class:`SparseUpdate` pairs a mask with one value per
selected cell, which is all that needs to be stored or optimized.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError
from .linalg import RngStream

MODES = ("bernoulli", "exact-count", "structured-columns")


def _check_p(p):
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise InvalidInputError(f"density p must lie in [0, 1], got {p}")


@dataclass(frozen=True, eq=False)
class Mask:
    shape: tuple
    p: float
    mode: str
    flat: np.ndarray
    seed: int | None = None
    stream_id: int | None = None

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown mask mode {self.mode!r}")
        _check_p(self.p)
        flat = np.asarray(self.flat, dtype=np.int64).ravel()
        numel = int(np.prod(shape, dtype=np.int64))
        if flat.size and (flat[0] < 0 or flat[-1] >= numel or np.any(np.diff(flat) <= 0)):
            raise InvalidInputError("mask coordinates must be unique, sorted and in range")
        flat.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "flat", flat)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.p == other.p
            and self.mode == other.mode
            and np.array_equal(self.flat, other.flat)
        )

    @classmethod
    def full(cls, shape):
        numel = int(np.prod(shape, dtype=np.int64))
        return cls(tuple(shape), 1.0, "exact-count", np.arange(numel))

    @classmethod
    def from_coords(cls, shape, coords, p=None, mode="exact-count"):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(shape))
        flat = np.unique(np.ravel_multi_index(tuple(coords.T), shape))
        numel = int(np.prod(shape, dtype=np.int64))
        if p is None:
            p = flat.size / numel if numel else 0.0
        return cls(tuple(shape), float(p), mode, flat)

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def count(self) -> int:
        return int(self.flat.size)

    @property
    def coords(self) -> np.ndarray:
        """Selected cells as a ``(count, ndim)`` index array."""
        if not self.shape:
            return np.zeros((self.count, 0), dtype=np.int64)
        return np.stack(np.unravel_index(self.flat, self.shape), axis=1)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.numel)
        out[self.flat] = 1.0
        return out.reshape(self.shape)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "p": self.p,
            "mode": self.mode,
            "seed": self.seed,
            "stream_id": self.stream_id,
            "coords": self.coords.tolist(),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Mask":
        shape = tuple(record["shape"])
        coords = np.asarray(record["coords"], dtype=np.int64).reshape(-1, len(shape))
        flat = np.ravel_multi_index(tuple(coords.T), shape) if coords.size else np.zeros(0, np.int64)
        return cls(shape, float(record["p"]), record["mode"], flat,
                   record.get("seed"), record.get("stream_id"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Mask":
        return cls.from_dict(json.loads(text))


def gen_random_mask(shape, p: float, mode: str = "bernoulli", rng: RngStream | None = None) -> Mask:
    """Sample a mask with density ``p``.

    ``bernoulli`` keeps each cell independently with probability ``p``;
    ``exact-count`` keeps a uniformly random subset of ``round(p * numel)``
    cells (halves round up).
    """
    _check_p(p)
    rng = rng if rng is not None else RngStream(0)
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    numel = int(np.prod(shape, dtype=np.int64))
    if mode == "bernoulli":
        flat = np.flatnonzero(rng.bernoulli(p, numel))
    elif mode == "exact-count":
        k = int(math.floor(p * numel + 0.5))
        flat = np.sort(rng.choice(numel, k))
    else:
        raise InvalidInputError(f"random mask mode must be 'bernoulli' or 'exact-count', got {mode!r}")
    return Mask(shape, float(p), mode, flat, rng.seed, rng.stream_id)


def gen_structured_mask(shape, p: float, rng: RngStream | None = None) -> Mask:
    """Select ``ceil(p * cols)`` whole columns of a 2-D tensor."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2:
        raise InvalidInputError(f"structured masks need a 2-D shape, got {shape}")
    _check_p(p)
    rng = rng if rng is not None else RngStream(0)
    rows, cols = shape
    # p*cols can land a hair above an integer (0.1 * 30); don't round that up
    k = min(cols, int(math.ceil(p * cols - 1e-9)))
    chosen = np.sort(rng.choice(cols, k))
    flat = (np.arange(rows)[:, None] * cols + chosen[None, :]).ravel()
    return Mask(shape, float(p), "structured-columns", flat, rng.seed, rng.stream_id)


@dataclass(eq=False)
class SparseUpdate:
    """Trainable increment living on ``mask``'s selected cells."""

    mask: Mask
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(self.mask.count)
        else:
            self.values = np.asarray(self.values, dtype=np.float64).ravel().copy()
            if self.values.size != self.mask.count:
                raise InvalidInputError(
                    f"{self.values.size} values for {self.mask.count} selected cells"
                )

    def dense(self) -> np.ndarray:
        out = np.zeros(self.mask.numel)
        out[self.mask.flat] = self.values
        return out.reshape(self.mask.shape)


def apply_update(frozen, upd: SparseUpdate) -> np.ndarray:
    """Return ``frozen + S`` without touching ``frozen``."""
    frozen = np.asarray(frozen, dtype=np.float64)
    if frozen.shape != upd.mask.shape:
        raise InvalidInputError(f"shape {frozen.shape} does not match mask {upd.mask.shape}")
    out = frozen.copy()
    out.reshape(-1)[upd.mask.flat] += upd.values
    return out


def scatter_grad(dense_grad, mask: Mask) -> np.ndarray:
    """Gradient entries at the mask's cells, in mask order."""
    dense_grad = np.asarray(dense_grad, dtype=np.float64)
    if dense_grad.shape != mask.shape:
        raise InvalidInputError(f"shape {dense_grad.shape} does not match mask {mask.shape}")
    return dense_grad.reshape(-1)[mask.flat].copy()
