"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one PASS/FAIL line (collected in the terminal summary).
"""
import time

import numpy as np
import pytest

from randmask import cli
from randmask import experiments as ex
from randmask.linalg import RngStream
from randmask.sandbox import MlpModel, attach_peft, hessian_spectral_norm


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_criterion_1_closed_form(verdict):
    with Timer() as t:
        rep = ex.closed_form_check(50, (1, 10, 100), seed=0, tol=1e-8)
    worst = max(r["max_scaled_error"] for r in rep["rows"])
    ok = rep["passed"] and t.seconds < 10
    verdict("1 closed-form trajectory", ok,
            f"50 instances, worst scaled error {worst:.2e} (tol 1e-8), {t.seconds:.1f}s (< 10s)")
    assert ok


def test_criterion_2_dichotomy(verdict):
    with Timer() as t:
        rep = ex.dichotomy_check(20, seed=0, below=0.99, above=1.01, max_steps=100_000,
                                 diverge_steps=1000, loss_tol=1e-8)
    rows = rep["rows"]
    gap = max(r["stable_gap"] for r in rows)
    diverged = sum(r["unstable_diverged"] for r in rows)
    ok = rep["passed"] and t.seconds < 30
    verdict("2 stability dichotomy", ok,
            f"max stable gap {gap:.1e} (tol 1e-8), {diverged}/20 unstable runs diverged, "
            f"{t.seconds:.1f}s (< 30s)")
    assert ok


def test_criterion_3_norm_identity(verdict):
    with Timer() as t:
        rep = ex.norm_bound_check(10, trials=10_000, sigma=1.0, seed=0)
    z = max(abs(r["mc_mean_sq_norm"] - r["exact_expectation"]) / r["std_error"] for r in rep["rows"])
    ok = rep["passed"] and t.seconds < 60
    verdict("3 solution-norm identity", ok,
            f"10 instances, worst |MC - exact| = {z:.2f} SE (<= 3), all above bound - 3 SE: "
            f"{all(r['above_bound'] for r in rep['rows'])}, {t.seconds:.1f}s (< 60s)")
    assert ok


def test_criterion_4_eigenvalue_concentration(verdict):
    with Timer() as t:
        suite = ex.concentration_suite(n=4, d=400, ps=(0.1, 0.3, 0.7), trials=500, delta=0.05,
                                       trace_trials=2000, tail_trials=1, mean_tolerance=0.05,
                                       seed=0)
    parts = []
    ok = t.seconds < 60
    for r in suite["reports"]:
        dev, checks = r["deviation"], r["checks"]
        ok &= (checks["violation_fraction_le_delta"] and checks["per_index_mean_within_tolerance"]
               and checks["trace_identity_within_3se"])
        rel = ", ".join(f"{e:.3f}" for e in dev.mean_relative_error)
        parts.append(f"p={r['p']}: violations {dev.violation_fraction:.3f}, "
                     f"mean rel err [{rel}], trace z {r['trace'].z_score:+.2f}")
    verdict("4 eigenvalue concentration", ok, "; ".join(parts) + f"; {t.seconds:.1f}s (< 60s)")
    assert ok


def test_criterion_5_quadratic_form_tail(verdict):
    with Timer() as t:
        suite = ex.concentration_suite(ps=(), tail_n=3, tail_d=100, tail_p=0.5,
                                       tail_trials=20_000, seed=0)
    tail = suite["tail"]
    ok = tail.violations == 0 and t.seconds < 30
    verdict("5 quadratic-form tail", ok,
            f"{len(tail.s_grid)}-point grid, max excess over envelope + 3 SE {tail.max_violation:+.4f}, "
            f"{t.seconds:.1f}s (< 30s)")
    assert ok


def _two_parameter_check():
    model = MlpModel([np.array([[0.7]]), np.array([[-1.3]])], [np.zeros(1), np.zeros(1)],
                     "tanh", "mse")
    model = attach_peft(model, ["full", "full"], RngStream(0))
    X = RngStream(8).normal((30, 1))
    y = np.sin(2 * X[:, 0])
    theta = np.array([0.2, -0.4])

    def f(v):
        return model.loss_grad(X, y, v)[0]

    h = 1e-4
    H = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
            H[i, j] = (f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej)
                       + f(theta - ei - ej)) / (4 * h * h)
    exact = float(np.max(np.abs(np.linalg.eigvalsh((H + H.T) / 2))))
    model.set_theta(theta)
    est = hessian_spectral_norm(model, (X, y), iters=500, tol=1e-12, rng=RngStream(1)).value
    return abs(est - exact) / exact


def test_criterion_6_hessian_probe(verdict):
    with Timer() as t:
        head = ex.quadratic_head_check(seed=0)
        rel2 = _two_parameter_check()
    ok = head["relative_error"] <= 1e-4 and rel2 <= 1e-3 and t.seconds < 10
    verdict("6 Hessian probe", ok,
            f"least-squares head rel err {head['relative_error']:.1e} (<= 1e-4), "
            f"2-parameter model rel err {rel2:.1e} (<= 1e-3), {t.seconds:.1f}s (< 10s)")
    assert ok


@pytest.fixture(scope="module")
def probe_report():
    with Timer() as t:
        report = ex.run_probe(ex.ProbeSettings(seeds=5))
    report["seconds"] = t.seconds
    return report


@pytest.mark.parametrize("item", ["a", "b", "c", "d", "e"])
def test_criterion_7_trends(probe_report, item, verdict):
    rep = probe_report
    med = rep["medians"]
    checks = rep["checks"]
    fast = rep["seconds"] < 15 * 60

    def series(key, fmt):
        return " -> ".join(format(m[key], fmt) for m in med)

    if item == "a":
        ok = checks["best_lr_non_decreasing"]
        detail = f"best lr by ratio {series('ratio', 'g')}: {series('best_lr', 'g')}"
    elif item == "b":
        ok = checks["median_hessian_init_non_increasing"]
        detail = f"median init Hessian norm {series('median_hessian_init', '.3g')}"
    elif item == "c":
        ok = checks["median_distance_non_decreasing"]
        detail = (f"median distance at loss {rep['target_loss']:.3f}: "
                  f"{series('median_distance_at_target', '.3g')}")
    elif item == "d":
        ok = checks["longer_training_non_decreasing"]
        curve = rep["longer_training"]["curve"]
        accs = " -> ".join(f"{c['mean_test_accuracy']:.3f}" for c in curve)
        detail = (f"ratio {rep['longer_training']['ratio']} at lr {rep['longer_training']['lr']:g}, "
                  f"epochs {[c['epochs'] for c in curve]}: {accs}")
    else:
        ok = checks["masking_matches_full_ft"]
        gap = rep["full_ft"]["best_mean_accuracy"] - rep["compare"]["best_mean_accuracy"]
        detail = (f"masking p={rep['compare']['ratio']} {rep['compare']['best_mean_accuracy']:.4f} vs "
                  f"full {rep['full_ft']['best_mean_accuracy']:.4f}, gap {gap:+.4f} (<= 0.02)")
    ok = ok and fast
    verdict(f"7{item} desk-scale trend", ok, f"{detail}; probe {rep['seconds']:.0f}s (< 900s)")
    assert ok


@pytest.mark.parametrize("command", ["theory", "concentration", "sweep", "probe"])
def test_criterion_8_determinism(tmp_path, command, verdict):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        status = cli.main([command, "--seed", "0", "--workers", "1", "--out", str(out)])
        files = sorted(p.name for p in out.iterdir())
        runs.append((status, {name: (out / name).read_bytes() for name in files}))
    same = runs[0] == runs[1]
    ok = same and bool(runs[0][1]) and runs[0][0] in (0, 1)
    verdict(f"8 determinism ({command})", ok,
            f"{len(runs[0][1])} files byte-identical across two runs: {same} (exit {runs[0][0]})")
    assert ok
