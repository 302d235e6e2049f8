"""Dense linear algebra and random number substrate.

Matrices are plain 2-D ``float64`` numpy arrays. The eigensolver is a cyclic
Jacobi method; every Gram matrix handled here is at most a few hundred rows
because wide design matrices are reduced through ``B @ B.T`` first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .exceptions import ConvergenceError, InvalidInputError, NumericError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Draws come from the counter-based Philox4x64-10 generator with the
    128-bit key ``[seed, stream_id]`` and a zero starting counter, so two
    streams with the same pair produce bit-identical sequences. Child streams
    from :meth:`split` keep the seed and replace the stream id with
    ``splitmix64(stream_id ^ splitmix64(k))``.

    Normal variates use the Box-Muller transform on the stream's uniforms.
    A stream is single-owner; hand each worker its own split instead of
    sharing one instance.
    """

    def __init__(self, seed: int = 0, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise InvalidInputError("seed and stream_id must be non-negative")
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def split(self, k: int) -> "RngStream":
        return RngStream(self.seed, splitmix64(self.stream_id ^ splitmix64(int(k))))

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1]
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
        if size is None:
            return float(z[0])
        return z.reshape(shape)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self._gen.random(size) < p

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct integers from ``range(n)``, uniformly at random."""
        return self._gen.choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def as_matrix(A, name="matrix") -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return A


@dataclass(frozen=True)
class Spectrum:
    """Descending eigenvalues with a relative positivity cutoff."""

    eigenvalues: np.ndarray
    threshold: float = 1e-10

    def __post_init__(self):
        vals = np.asarray(self.eigenvalues, dtype=np.float64)
        if vals.ndim != 1:
            raise InvalidInputError("eigenvalues must be 1-D")
        if np.any(np.diff(vals) > 0):
            raise InvalidInputError("eigenvalues must be in non-increasing order")
        object.__setattr__(self, "eigenvalues", vals)

    def __len__(self):
        return len(self.eigenvalues)

    @property
    def top(self) -> float:
        return float(self.eigenvalues[0]) if len(self.eigenvalues) else 0.0

    @property
    def positive_mask(self) -> np.ndarray:
        if self.top <= 0:
            return np.zeros(len(self.eigenvalues), dtype=bool)
        return self.eigenvalues > self.threshold * self.top

    @property
    def positive(self) -> np.ndarray:
        return self.eigenvalues[self.positive_mask]


def sym_eigen(A, tol: float = 1e-12, max_sweeps: int = 100, threshold: float = 1e-10):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(spectrum, V)`` with eigenvalues in descending order and the
    matching orthonormal eigenvectors as the columns of ``V``. Sweeps stop
    once the off-diagonal Frobenius mass drops to ``tol * ||A||_F``.
    """
    A = as_matrix(A)
    n, m = A.shape
    if n != m:
        raise InvalidInputError(f"expected a square matrix, got {A.shape}")
    scale = np.max(np.abs(A)) if A.size else 0.0
    if np.max(np.abs(A - A.T), initial=0.0) > tol * scale:
        raise InvalidInputError("matrix is not symmetric within tolerance")

    A = 0.5 * (A + A.T)
    V = np.eye(n)
    fro = np.linalg.norm(A)
    if fro == 0.0:
        return Spectrum(np.zeros(n), threshold), V

    for _ in range(max_sweeps):
        if np.linalg.norm(A - np.diag(np.diag(A))) <= tol * fro:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = A[:, p].copy()
                col_q = A[:, q]
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :]
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q]
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off > tol * fro:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", off / fro)

    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return Spectrum(vals[order], threshold), V[:, order]


class PowerEstimate(NamedTuple):
    value: float
    converged: bool
    iterations: int


def power_method_norm(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iters: int = 100,
    tol: float = 1e-10,
    rng: RngStream | None = None,
) -> PowerEstimate:
    """Largest absolute eigenvalue of a self-adjoint operator.

    The running estimate is ``||A x||`` for the current unit iterate ``x``,
    i.e. the square root of the Rayleigh quotient of ``A^2``; unlike the plain
    Rayleigh quotient it does not stall when ``+lam`` and ``-lam`` are both
    dominant.
    """
    if dim <= 0:
        raise InvalidInputError("dim must be positive")
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    rng = rng if rng is not None else RngStream(0)

    def start():
        x = rng.normal(dim)
        return x / np.linalg.norm(x)

    def step(x):
        y = np.asarray(apply(x), dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise NumericError("operator returned non-finite values")
        return y

    x = start()
    y = step(x)
    est = float(np.linalg.norm(y))
    if est == 0.0:
        # start vector may sit in the null space; retry once before giving up
        x = start()
        y = step(x)
        est = float(np.linalg.norm(y))
        if est == 0.0:
            return PowerEstimate(0.0, True, 1)

    for k in range(2, iters + 1):
        x = y / est
        y = step(x)
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return PowerEstimate(0.0, True, k)
        if abs(new - est) < tol * new:
            return PowerEstimate(new, True, k)
        est = new
    return PowerEstimate(est, False, iters)


def gram_pinv(B, tau: float = 1e-10) -> np.ndarray:
    """Pseudo-inverse of ``B`` through the smaller of its two Gram matrices.

    ``B^+ = B.T (B B.T)^+`` for wide ``B`` and ``(B.T B)^+ B.T`` for tall.
    """
    B = as_matrix(B, "B")
    tall = B.shape[0] > B.shape[1]
    G = B.T @ B if tall else B @ B.T
    spec, U = sym_eigen(G, threshold=tau)
    keep = spec.positive_mask
    inv = np.zeros_like(spec.eigenvalues)
    inv[keep] = 1.0 / spec.eigenvalues[keep]
    G_pinv = (U * inv) @ U.T
    return G_pinv @ B.T if tall else B.T @ G_pinv


def gram_pinv_solve(B, y, tau: float = 1e-10) -> np.ndarray:
    """Minimum-norm least-squares solution of ``B x = y``."""
    B = as_matrix(B, "B")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (B.shape[0],):
        raise InvalidInputError(f"y has shape {y.shape}, expected ({B.shape[0]},)")
    return gram_pinv(B, tau) @ y
