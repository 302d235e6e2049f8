"""Monte-Carlo checks of eigenvalue concentration under Bernoulli masking.

For a feature matrix ``X`` (n x d) and a diagonal 0/1 mask ``M`` with
i.i.d. Bernoulli(p) entries, the nonzero spectrum of ``M X^T X M`` equals
that of the n x n matrix ``X M X^T``. Everything below works with the
small matrix.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InvalidInputError, PreconditionError
from .linalg import RngStream, Spectrum, as_matrix, sym_eigen
from .masking import Mask

BOUND_VARIANTS = ("proof-consistent", "as-stated")
CHUNK = 256  # trials per split stream; results depend on trial count only


def _selection(mask, d: int) -> np.ndarray:
    """0/1 vector of length ``d`` from a Mask or array-like."""
    if isinstance(mask, Mask):
        if mask.numel != d:
            raise InvalidInputError(f"mask covers {mask.numel} coordinates, X has {d}")
        return mask.dense().reshape(-1)
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.size != d:
        raise InvalidInputError(f"mask covers {m.size} coordinates, X has {d}")
    return m


def masked_spectrum(X, mask, threshold: float = 1e-10) -> Spectrum:
    """Descending eigenvalues of ``X M X^T`` (n values)."""
    X = as_matrix(X, "X")
    m = _selection(mask, X.shape[1])
    sel = X[:, m > 0]
    n, k = sel.shape
    if k >= n:
        return sym_eigen(sel @ sel.T, threshold=threshold)[0]
    # fewer kept columns than rows: same nonzero spectrum from the k x k side
    lam = np.zeros(n)
    if k:
        lam[:k] = sym_eigen(sel.T @ sel, threshold=threshold)[0].eigenvalues
    return Spectrum(lam, threshold)


def theorem_bound(n: int, d: int, r: float, delta: float, variant: str = "proof-consistent") -> float:
    """High-probability bound on ``max_i |lam_i - p lam_i(X^T X)|``.

    Both variants share the leading term ``2 sqrt(2 d n^3 r^4)``. The
    ``proof-consistent`` second term is ``sqrt(2 d n^2 r^4 log(1/delta))``,
    the value of ``t`` that solves ``exp(-t^2 / (2 d n^2 r^4)) = delta``.
    ``as-stated`` divides by ``d n^2 r^4`` instead of multiplying.
    """
    if not 0.0 < delta < 1.0:
        raise InvalidInputError(f"delta must lie in (0, 1), got {delta}")
    scale = d * n**2 * r**4
    lead = 2.0 * math.sqrt(2.0 * d * n**3 * r**4)
    log_term = math.log(1.0 / delta)
    if variant == "proof-consistent":
        return lead + math.sqrt(2.0 * scale * log_term)
    if variant == "as-stated":
        return lead + math.sqrt(2.0 * log_term / scale) if scale > 0 else math.inf
    raise InvalidInputError(f"unknown bound variant {variant!r}")


@dataclass
class ConcentrationConfig:
    p: float
    trials: int = 500
    delta: float = 0.05
    bound_variant: str = "proof-consistent"
    entry_bound: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InvalidInputError(f"p must lie in [0, 1], got {self.p}")
        if not 0.0 < self.delta < 1.0:
            raise InvalidInputError(f"delta must lie in (0, 1), got {self.delta}")
        if self.trials < 1:
            raise InvalidInputError("trials must be >= 1")
        if self.bound_variant not in BOUND_VARIANTS:
            raise InvalidInputError(f"unknown bound variant {self.bound_variant!r}")


@dataclass
class DeviationReport:
    p: float
    trials: int
    delta: float
    bound_variant: str
    reference: np.ndarray       # p * lam_i(X^T X)
    mean_eigenvalues: np.ndarray
    max_deviation: np.ndarray
    bound: float
    bound_as_stated: float
    violations: int             # trials where some index exceeds `bound`
    weyl_violations: int
    max_q_norm: float
    trace: "TraceReport" = field(default=None)

    @property
    def violation_fraction(self) -> float:
        return self.violations / self.trials

    @property
    def mean_relative_error(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(self.mean_eigenvalues - self.reference) / np.abs(self.reference)
        return np.where(self.reference == 0, np.abs(self.mean_eigenvalues), rel)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "trace"}
        for k, v in out.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
        out["violation_fraction"] = self.violation_fraction
        out["mean_relative_error"] = self.mean_relative_error.tolist()
        out["trace"] = None if self.trace is None else self.trace.to_dict()
        return out

    def csv_rows(self):
        """Rows of (index, reference, mean, max deviation, bound)."""
        header = ("index", "reference", "mean_eigenvalue", "max_deviation", "bound")
        rows = [
            (i + 1, float(ref), float(mu), float(dev), self.bound)
            for i, (ref, mu, dev) in enumerate(
                zip(self.reference, self.mean_eigenvalues, self.max_deviation)
            )
        ]
        return header, rows


def _check_entries(X, r):
    if X.min(initial=0.0) < 0.0 or X.max(initial=0.0) > r:
        raise PreconditionError(f"entries of X must lie in [0, {r}]")


def _chunks(trials):
    for start in range(0, trials, CHUNK):
        yield start // CHUNK, min(CHUNK, trials - start)


def deviation_trial_suite(X, cfg: ConcentrationConfig, rng: RngStream) -> DeviationReport:
    """Sample ``cfg.trials`` Bernoulli masks and record eigenvalue deviations."""
    X = as_matrix(X, "X")
    _check_entries(X, cfg.entry_bound)
    n, d = X.shape
    full = X @ X.T
    col_sq = np.sum(X**2, axis=0)
    base, _ = sym_eigen(full)
    reference = cfg.p * base.eigenvalues
    bound = theorem_bound(n, d, cfg.entry_bound, cfg.delta, cfg.bound_variant)
    stated = theorem_bound(n, d, cfg.entry_bound, cfg.delta, "as-stated")

    total = np.zeros(n)
    max_dev = np.zeros(n)
    violations = 0
    weyl_bad = 0
    max_q = 0.0
    traces = []
    for chunk, size in _chunks(cfg.trials):
        sub = rng.split(chunk)
        for _ in range(size):
            m = sub.bernoulli(cfg.p, d)
            sel = X[:, m]
            G = sel @ sel.T
            lam = sym_eigen(G)[0].eigenvalues
            dev = np.abs(lam - reference)
            q_spec = sym_eigen(G - cfg.p * full)[0].eigenvalues
            q_norm = float(np.max(np.abs(q_spec)))
            total += lam
            np.maximum(max_dev, dev, out=max_dev)
            violations += bool(np.any(dev > bound))
            weyl_bad += bool(np.any(dev > q_norm * (1 + 1e-9) + 1e-9 * base.top))
            max_q = max(max_q, q_norm)
            traces.append(float(col_sq[m].sum()))  # trace of G, exact

    traces = np.asarray(traces)
    analytic = cfg.p * float(np.sum(X**2))
    se = float(np.std(traces - traces[0], ddof=1) / math.sqrt(len(traces))) if len(traces) > 1 else 0.0
    return DeviationReport(
        p=cfg.p,
        trials=cfg.trials,
        delta=cfg.delta,
        bound_variant=cfg.bound_variant,
        reference=reference,
        mean_eigenvalues=total / cfg.trials,
        max_deviation=max_dev,
        bound=bound,
        bound_as_stated=stated,
        violations=violations,
        weyl_violations=weyl_bad,
        max_q_norm=max_q,
        trace=TraceReport(float(traces.mean()), analytic, se, cfg.trials),
    )


@dataclass
class TraceReport:
    mc_mean_trace: float
    analytic: float
    std_error: float
    trials: int

    @property
    def z_score(self) -> float:
        diff = self.mc_mean_trace - self.analytic
        if self.std_error == 0:
            return 0.0 if abs(diff) <= 1e-9 * max(1.0, abs(self.analytic)) else math.inf
        return diff / self.std_error

    def to_dict(self) -> dict:
        out = asdict(self)
        out["z_score"] = self.z_score
        return out


def trace_identity_check(X, p: float, trials: int, rng: RngStream) -> TraceReport:
    """Monte-Carlo mean of ``sum_i lam_i`` against ``p ||X||_F^2``.

    The trace of ``X M X^T`` is ``sum_j m_j ||z_j||^2`` over columns ``z_j``,
    so no eigendecomposition is needed per trial.
    """
    if trials < 2:
        raise InvalidInputError("trials must be >= 2")
    X = as_matrix(X, "X")
    col_sq = np.sum(X**2, axis=0)
    samples = []
    for chunk, size in _chunks(trials):
        masks = rng.split(chunk).bernoulli(p, (size, X.shape[1]))
        samples.append(masks @ col_sq)
    samples = np.concatenate(samples)
    se = float(np.std(samples - samples[0], ddof=1) / math.sqrt(trials))
    return TraceReport(float(samples.mean()), p * float(col_sq.sum()), se, trials)


@dataclass
class TailReport:
    s_grid: np.ndarray
    empirical_tail: np.ndarray
    envelope: np.ndarray
    band: np.ndarray            # 3 binomial standard errors at the envelope
    variance_proxy: float
    trials: int

    @property
    def excess(self) -> np.ndarray:
        return self.empirical_tail - (np.minimum(self.envelope, 1.0) + self.band)

    @property
    def max_violation(self) -> float:
        return float(np.max(self.excess)) if self.excess.size else -math.inf

    @property
    def violations(self) -> int:
        return int(np.sum(self.excess > 0))

    def to_dict(self) -> dict:
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        out["max_violation"] = self.max_violation
        out["violations"] = self.violations
        return out


def quadratic_form_tail_check(X, u, p: float, trials: int, rng: RngStream, s_grid=None) -> TailReport:
    """Empirical tail of ``<u, Q u>`` against its sub-Gaussian envelope.

    ``<u, Q u> = sum_j (m_j - p) (z_j^T u)^2`` with variance proxy
    ``sum_j (z_j^T u)^4 / 4``; the envelope is
    ``P(|<u,Qu>| > s) <= 2 exp(-s^2 / (2 * proxy))``.
    """
    X = as_matrix(X, "X")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (X.shape[0],):
        raise InvalidInputError(f"u has shape {u.shape}, expected ({X.shape[0]},)")
    if abs(np.linalg.norm(u) - 1.0) > 1e-12:
        raise InvalidInputError("u must be a unit vector")
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    c = (X.T @ u) ** 2
    proxy = float(np.sum(c**2) / 4.0)
    if s_grid is None:
        sd = math.sqrt(proxy) if proxy > 0 else 1.0
        s_grid = sd * np.linspace(0.25, 4.0, 16)
    s_grid = np.asarray(s_grid, dtype=np.float64)

    values = []
    for chunk, size in _chunks(trials):
        masks = rng.split(chunk).bernoulli(p, (size, X.shape[1]))
        values.append((masks - p) @ c)
    values = np.abs(np.concatenate(values))
    tail = np.array([np.mean(values > s) for s in s_grid])
    if proxy > 0:
        env = 2.0 * np.exp(-(s_grid**2) / (2.0 * proxy))
    else:
        env = np.where(s_grid >= 0, 0.0, 2.0)
    capped = np.minimum(env, 1.0)
    band = 3.0 * np.sqrt(capped * (1.0 - capped) / trials)
    return TailReport(s_grid, tail, env, band, proxy, trials)
