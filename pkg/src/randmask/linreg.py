"""Overparameterized masked linear regression.

The loss is ``L(w) = ||y - X (w_tilde + M w)||^2 / (2n)`` with a fixed 0/1
diagonal mask ``M``. Gradient descent on it has a closed-form trajectory, a
sharp stability threshold ``2n / lam_1(M X^T X M)`` and a minimum-norm limit
``(X M)^+ y`` whose expected squared norm under Gaussian label noise is
computed exactly by :func:`verify_norm_bound`.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .concentration import _selection, masked_spectrum
from .exceptions import InvalidInputError
from .linalg import RngStream, Spectrum, as_matrix, gram_pinv, sym_eigen
from .masking import gen_random_mask


@dataclass
class RegressionProblem:
    X: np.ndarray
    y: np.ndarray
    w_tilde: np.ndarray = None
    r: float | None = None

    def __post_init__(self):
        self.X = as_matrix(self.X, "X")
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n, d = self.X.shape
        if self.y.shape != (n,):
            raise InvalidInputError(f"y has {self.y.size} entries, X has {n} rows")
        if self.w_tilde is None:
            self.w_tilde = np.zeros(d)
        self.w_tilde = np.asarray(self.w_tilde, dtype=np.float64).reshape(-1)
        if self.w_tilde.shape != (d,):
            raise InvalidInputError(f"w_tilde has {self.w_tilde.size} entries, expected {d}")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.w_tilde))):
            raise InvalidInputError("non-finite targets or pretrained weights")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def overparameterized(self) -> bool:
        return self.d >= self.n

    @property
    def residual_target(self) -> np.ndarray:
        """``y - X w_tilde``: the part of the targets left for ``M w``."""
        return self.y - self.X @ self.w_tilde

    def to_dict(self) -> dict:
        return {"X": self.X.tolist(), "y": self.y.tolist(),
                "w_tilde": self.w_tilde.tolist(), "r": self.r}

    @classmethod
    def from_dict(cls, record: dict) -> "RegressionProblem":
        return cls(np.array(record["X"]), np.array(record["y"]),
                   np.array(record["w_tilde"]), record.get("r"))


@dataclass
class NoiseModel:
    w_star: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        self.w_star = np.asarray(self.w_star, dtype=np.float64).reshape(-1)
        if self.sigma < 0:
            raise InvalidInputError("sigma must be non-negative")


@dataclass
class GDConfig:
    eta: float
    steps: int = 1000
    divergence_cap: float | None = None  # None: 1e6 x initial loss
    stop_below: float | None = None      # optional early exit once loss <= this

    def __post_init__(self):
        if not self.eta > 0:
            raise InvalidInputError("eta must be positive")
        if self.steps < 0:
            raise InvalidInputError("steps must be >= 0")


@dataclass
class TrajectoryResult:
    w: np.ndarray
    losses: list = field(default_factory=list)  # losses[t] = L(w_t)
    diverged: bool = False
    distance_from_init: float = 0.0

    @property
    def steps_run(self) -> int:
        return len(self.losses) - 1

    def loss_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("step", "loss"))
        for t, loss in enumerate(self.losses):
            writer.writerow((t, f"{loss:.17g}"))
        return buf.getvalue()


def make_problem(n: int, d: int, rng: RngStream, entries: str = "gaussian",
                 noise: NoiseModel | None = None) -> RegressionProblem:
    """Random instance; targets come from ``noise`` when given, else N(0, 1)."""
    if entries == "gaussian":
        X = rng.normal((n, d))
        r = None
    elif entries == "uniform":
        X = rng.uniform((n, d))
        r = 1.0
    else:
        raise InvalidInputError(f"unknown entry distribution {entries!r}")
    if noise is None:
        y = rng.normal(n)
    else:
        y = X @ noise.w_star + noise.sigma * rng.normal(n)
    return RegressionProblem(X, y, r=r)


def _check_w(prob, w, name="w"):
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape != (prob.d,):
        raise InvalidInputError(f"{name} has {w.size} entries, expected {prob.d}")
    return w


def masked_loss(prob: RegressionProblem, mask, w) -> float:
    m = _selection(mask, prob.d)
    w = _check_w(prob, w)
    resid = prob.residual_target - prob.X @ (m * w)
    return float(resid @ resid) / (2 * prob.n)


def masked_grad(prob: RegressionProblem, mask, w) -> np.ndarray:
    """``(1/n) (M X^T X M w - M X^T (y - X w_tilde))``."""
    m = _selection(mask, prob.d)
    w = _check_w(prob, w)
    resid = prob.residual_target - prob.X @ (m * w)
    return -m * (prob.X.T @ resid) / prob.n


def gd_iterate(prob: RegressionProblem, mask, cfg: GDConfig, w0=None) -> TrajectoryResult:
    """Run full-batch gradient descent, recording the loss at every iterate."""
    m = _selection(mask, prob.d)
    w0 = np.zeros(prob.d) if w0 is None else _check_w(prob, w0, "w0")
    XM = prob.X * m
    target = prob.residual_target
    scale = cfg.eta / prob.n

    w = w0.copy()
    resid = target - XM @ w
    loss = float(resid @ resid) / (2 * prob.n)
    losses = [loss]
    if cfg.divergence_cap is not None:
        cap = cfg.divergence_cap
    else:
        cap = 1e6 * loss if loss > 0 else math.inf
    diverged = not math.isfinite(loss)
    for _ in range(cfg.steps):
        if diverged or (cfg.stop_below is not None and loss <= cfg.stop_below):
            break
        w = w + scale * (XM.T @ resid)
        resid = target - XM @ w
        loss = float(resid @ resid) / (2 * prob.n)
        losses.append(loss)
        if not math.isfinite(loss) or loss > cap:
            diverged = True
    return TrajectoryResult(w, losses, diverged, float(np.linalg.norm(w - w0)))


def _masked_eigenbasis(prob, m, tau=1e-10):
    """Right singular vectors of ``X M`` with positive eigenvalues of ``M X^T X M``."""
    B = prob.X * m
    if prob.n > prob.d:
        spec, V = sym_eigen(B.T @ B, threshold=tau)
        keep = spec.positive_mask
        return spec.eigenvalues[keep], V[:, keep], B
    spec, U = sym_eigen(B @ B.T, threshold=tau)
    keep = spec.positive_mask
    lam = spec.eigenvalues[keep]
    V = (B.T @ U[:, keep]) / np.sqrt(lam)
    return lam, V, B


def min_norm_solution(prob: RegressionProblem, mask, tau: float = 1e-10) -> np.ndarray:
    """``(X M)^+ (y - X w_tilde)``, the limit of stable GD from zero."""
    m = _selection(mask, prob.d)
    return gram_pinv(prob.X * m, tau) @ prob.residual_target


def gd_closed_form(prob: RegressionProblem, mask, cfg: GDConfig, w0, t: int) -> np.ndarray:
    """``w_t = (I - (eta/n) A)^t (w0 - w_hat) + w_hat`` with ``A = M X^T X M``.

    The matrix power acts as ``(1 - eta lam_i / n)^t`` along each right
    singular vector of ``X M`` and as the identity on the null space of ``A``.
    """
    if t < 0:
        raise InvalidInputError("t must be >= 0")
    m = _selection(mask, prob.d)
    w0 = np.zeros(prob.d) if w0 is None else _check_w(prob, w0, "w0")
    if t == 0:
        return w0.copy()
    lam, V, B = _masked_eigenbasis(prob, m)
    w_hat = gram_pinv(B) @ prob.residual_target
    z = w0 - w_hat
    coef = V.T @ z
    with np.errstate(over="ignore"):
        factors = (1.0 - cfg.eta * lam / prob.n) ** t
    return w_hat + z - V @ coef + V @ (factors * coef)


def stability_threshold(prob: RegressionProblem, mask) -> float:
    """Largest stable step ``2n / lam_1``; ``inf`` when the masked operator is zero."""
    top = masked_spectrum(prob.X, mask).top
    return 2.0 * prob.n / top if top > 0 else math.inf


def top_eigenvector(prob: RegressionProblem, mask) -> np.ndarray:
    """Unit eigenvector of ``M X^T X M`` for its largest eigenvalue."""
    m = _selection(mask, prob.d)
    lam, V, _ = _masked_eigenbasis(prob, m)
    if lam.size == 0:
        raise InvalidInputError("masked operator is zero")
    return V[:, 0]


def solution_norm_bound(spectrum: Spectrum, sigma: float) -> float:
    """``sum over positive lam_i of sigma^2 / lam_i``."""
    if sigma < 0:
        raise InvalidInputError("sigma must be non-negative")
    pos = spectrum.positive
    return float(sigma**2 * np.sum(1.0 / pos)) if pos.size else 0.0


@dataclass
class NormBoundReport:
    mc_mean_sq_norm: float
    std_error: float
    bound: float
    signal_term: float   # ||(XM)^+ X (w* - w_tilde)||^2
    trials: int

    @property
    def exact_expectation(self) -> float:
        return self.bound + self.signal_term

    def to_dict(self) -> dict:
        return {
            "mc_mean_sq_norm": self.mc_mean_sq_norm,
            "std_error": self.std_error,
            "bound": self.bound,
            "signal_term": self.signal_term,
            "exact_expectation": self.exact_expectation,
            "trials": self.trials,
        }


NOISE_CHUNK = 1000


def verify_norm_bound(prob: RegressionProblem, noise: NoiseModel, mask, trials: int,
                      rng: RngStream) -> NormBoundReport:
    """Monte-Carlo ``E ||w_hat||^2`` for ``y = X w* + eps``, ``eps ~ N(0, sigma^2 I)``.

    ``prob.y`` is ignored; only its design matrix and pretrained weights are
    used.
    """
    if trials < 2:
        raise InvalidInputError("trials must be >= 2")
    m = _selection(mask, prob.d)
    w_star = _check_w(prob, noise.w_star, "w_star")
    P = gram_pinv(prob.X * m)
    signal = prob.X @ (w_star - prob.w_tilde)
    w_signal = P @ signal

    sq = []
    for start in range(0, trials, NOISE_CHUNK):
        size = min(NOISE_CHUNK, trials - start)
        eps = noise.sigma * rng.split(start // NOISE_CHUNK).normal((size, prob.n))
        W = (signal[None, :] + eps) @ P.T
        sq.append(np.sum(W**2, axis=1))
    sq = np.concatenate(sq)

    bound = solution_norm_bound(masked_spectrum(prob.X, m), noise.sigma)
    return NormBoundReport(
        mc_mean_sq_norm=float(sq.mean()),
        std_error=float(sq.std(ddof=1) / math.sqrt(trials)),
        bound=bound,
        signal_term=float(w_signal @ w_signal),
        trials=trials,
    )


class MaskedLinearRegression(RegressorMixin, BaseEstimator):
    """Least squares that only trains a random subset of coordinates.

    Parameters
    ----------
    p : float
        Trainable fraction of the coefficients.
    mask_mode : {"bernoulli", "exact-count"}
    solver : {"gd", "closed-form", "min-norm"}
        ``gd`` runs gradient descent from ``w_tilde``'s increment of zero;
        ``closed-form`` evaluates the same iterate analytically; ``min-norm``
        jumps to the limit ``(X M)^+ y``.
    eta : float or None
        Step size. ``None`` uses ``eta_fraction`` times the stability threshold.
    steps : int
    w_tilde : array or None
        Frozen pretrained coefficients; only the increment is learned.
    random_state : int
        Seed of the mask stream.
    """

    def __init__(self, p=1.0, mask_mode="bernoulli", solver="gd", eta=None,
                 eta_fraction=0.5, steps=1000, w_tilde=None, random_state=0):
        self.p = p
        self.mask_mode = mask_mode
        self.solver = solver
        self.eta = eta
        self.eta_fraction = eta_fraction
        self.steps = steps
        self.w_tilde = w_tilde
        self.random_state = random_state

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64, y_numeric=True)
        prob = RegressionProblem(X, y, self.w_tilde)
        self.mask_ = gen_random_mask((prob.d,), self.p, self.mask_mode, RngStream(self.random_state))
        self.spectrum_ = masked_spectrum(X, self.mask_)
        self.threshold_ = stability_threshold(prob, self.mask_)
        eta = self.eta
        if eta is None:
            eta = self.eta_fraction * self.threshold_ if math.isfinite(self.threshold_) else 1.0
        self.eta_ = eta
        self.diverged_ = False
        self.loss_curve_ = []
        if self.solver == "gd":
            traj = gd_iterate(prob, self.mask_, GDConfig(eta, self.steps))
            w, self.loss_curve_, self.diverged_ = traj.w, traj.losses, traj.diverged
        elif self.solver == "closed-form":
            w = gd_closed_form(prob, self.mask_, GDConfig(eta, self.steps), None, self.steps)
        elif self.solver == "min-norm":
            w = min_norm_solution(prob, self.mask_)
        else:
            raise InvalidInputError(f"unknown solver {self.solver!r}")
        m = self.mask_.dense()
        self.increment_ = m * w
        self.coef_ = prob.w_tilde + self.increment_
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return X @ self.coef_
