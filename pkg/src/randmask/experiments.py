"""Seeded experiment suites behind the command-line subcommands.

Each ``run_*`` function takes a resolved config object and returns a plain
report dictionary plus the tables to write, and never touches the file
system itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import concentration as conc
from .linalg import RngStream, sym_eigen
from .linreg import (
    GDConfig,
    NoiseModel,
    RegressionProblem,
    gd_closed_form,
    gd_iterate,
    make_problem,
    masked_loss,
    min_norm_solution,
    stability_threshold,
    top_eigenvector,
    verify_norm_bound,
)
from .masking import gen_random_mask
from .sandbox import (
    LayerSpec,
    MlpModel,
    TrainConfig,
    attach_peft,
    distance_at_loss,
    finetune,
    gaussian_mixture_pair,
    hessian_spectral_norm,
    linear_regression_task,
    longer_training_probe,
    pretrain,
)
from .sweep import SweepGrid, best_cell, lr_verdict, run_sweep, trend_report

# -- shared desk-scale setup ---------------------------------------------------

STANDARD_HIDDEN = (64, 64)
STANDARD_RATIOS = (1.0, 0.1, 0.01)
STANDARD_LRS = (1e-3, 1e-2, 1e-1, 1e0)


def standard_task_pair(seed: int = 0):
    return gaussian_mixture_pair(dim=16, n_classes=4, n_train=512, n_test=2048, seed=seed)


def standard_pretrained(base, seed: int = 0) -> MlpModel:
    return pretrain(base, STANDARD_HIDDEN, TrainConfig(lr=1e-2, epochs=200), RngStream(seed))


# -- theory ----------------------------------------------------------------------

P_CHOICES = (0.2, 0.35, 0.5, 0.75, 1.0)


@dataclass
class Instance:
    prob: RegressionProblem
    mask: object
    p: float
    rng: RngStream


def theory_instance(index: int, seed: int, n_max: int = 8, d_max: int = 40,
                    require_nonempty: bool = True) -> Instance:
    """Instance ``index`` of the seeded ensemble: Gaussian X, Bernoulli mask."""
    rng = RngStream(seed).split(index)
    n = 2 + int(rng.uniform() * (n_max - 1))
    d = n + 1 + int(rng.uniform() * (d_max - n))
    p = P_CHOICES[index % len(P_CHOICES)]
    prob = make_problem(n, d, rng.split(0))
    for attempt in range(100):
        mask = gen_random_mask((d,), p, "bernoulli", rng.split(1 + attempt))
        if mask.count or not require_nonempty:
            break
    return Instance(prob, mask, p, rng.split(200))


def closed_form_check(instances: int, steps=(1, 10, 100), seed: int = 0, tol: float = 1e-8) -> dict:
    """Closed-form trajectory against iterated gradient descent."""
    rows = []
    for i in range(instances):
        inst = theory_instance(i, seed, require_nonempty=False)
        thr = stability_threshold(inst.prob, inst.mask)
        eta = 0.9 * thr if math.isfinite(thr) else 0.1
        w0 = inst.rng.normal(inst.prob.d)
        worst = 0.0
        for t in steps:
            it = gd_iterate(inst.prob, inst.mask, GDConfig(eta, t, divergence_cap=math.inf), w0).w
            cf = gd_closed_form(inst.prob, inst.mask, GDConfig(eta, t), w0, t)
            worst = max(worst, float(np.linalg.norm(cf - it) / (1.0 + np.linalg.norm(it))))
        rows.append({"instance": i, "n": inst.prob.n, "d": inst.prob.d, "p": inst.p,
                     "eta": eta, "max_scaled_error": worst, "passed": worst <= tol})
    return {"rows": rows, "passed": all(r["passed"] for r in rows), "tolerance": tol}


def dichotomy_check(instances: int, seed: int = 0, below: float = 0.99, above: float = 1.01,
                    max_steps: int = 100_000, diverge_steps: int = 1000,
                    loss_tol: float = 1e-8) -> dict:
    """Stable and unstable runs just either side of ``2n / lam_1``.

    The unstable run starts at ``w_hat + v_1``, the top eigenvector offset
    from the minimum-norm solution, which excites the unstable direction.
    """
    rows = []
    for i in range(instances):
        inst = theory_instance(1000 + i, seed)
        prob, mask = inst.prob, inst.mask
        thr = stability_threshold(prob, mask)
        w_hat = min_norm_solution(prob, mask)
        opt = masked_loss(prob, mask, w_hat)
        stable = gd_iterate(prob, mask, GDConfig(below * thr, max_steps, stop_below=opt + 0.1 * loss_tol))
        gap = stable.losses[-1] - opt
        w0 = w_hat + top_eigenvector(prob, mask)
        unstable = gd_iterate(prob, mask, GDConfig(above * thr, diverge_steps), w0)
        ok_stable = (not stable.diverged) and gap <= loss_tol
        rows.append({
            "instance": i, "n": prob.n, "d": prob.d, "p": inst.p, "threshold": thr,
            "stable_steps": stable.steps_run, "stable_gap": gap,
            "unstable_steps": unstable.steps_run, "unstable_diverged": unstable.diverged,
            "passed": ok_stable and unstable.diverged,
        })
    return {"rows": rows, "passed": all(r["passed"] for r in rows)}


def norm_bound_check(instances: int, trials: int = 10_000, sigma: float = 1.0, seed: int = 0,
                     n_max: int = 8, d_max: int = 40) -> dict:
    rows = []
    for i in range(instances):
        inst = theory_instance(2000 + i, seed, n_max, d_max)
        w_star = inst.rng.split(0).normal(inst.prob.d)
        rep = verify_norm_bound(inst.prob, NoiseModel(w_star, sigma), inst.mask, trials,
                                inst.rng.split(1))
        within = abs(rep.mc_mean_sq_norm - rep.exact_expectation) <= 3 * rep.std_error
        above = rep.mc_mean_sq_norm >= rep.bound - 3 * rep.std_error
        rows.append({"instance": i, "n": inst.prob.n, "d": inst.prob.d, "p": inst.p,
                     **rep.to_dict(), "within_3se": within, "above_bound": above,
                     "passed": within and above})
    return {"rows": rows, "passed": all(r["passed"] for r in rows)}


def sample_trajectory(seed: int = 0, eta_factor: float = 0.5, steps: int = 200):
    inst = theory_instance(0, seed)
    eta = eta_factor * stability_threshold(inst.prob, inst.mask)
    return gd_iterate(inst.prob, inst.mask, GDConfig(eta, steps))


# -- concentration -------------------------------------------------------------------


def uniform_design(n: int, d: int, seed: int, stream: int = 0) -> np.ndarray:
    return RngStream(seed).split(stream).uniform((n, d))


def concentration_suite(n=4, d=400, ps=(0.1, 0.3, 0.7), trials=500, delta=0.05,
                        trace_trials=2000, tail_n=3, tail_d=100, tail_p=0.5,
                        tail_trials=20_000, mean_tolerance=0.05, seed=0) -> dict:
    X = uniform_design(n, d, seed)
    rng = RngStream(seed)
    reports = []
    for k, p in enumerate(ps):
        cfg = conc.ConcentrationConfig(p, trials, delta)
        rep = conc.deviation_trial_suite(X, cfg, rng.split(10 + k))
        trace = conc.trace_identity_check(X, p, trace_trials, rng.split(20 + k)) if trace_trials >= 2 else None
        mean_ok = bool(np.all(rep.mean_relative_error <= mean_tolerance))
        trace_ok = trace is None or abs(trace.z_score) <= 3.0
        reports.append({
            "p": p,
            "deviation": rep,
            "trace": trace,
            "checks": {
                "violation_fraction_le_delta": rep.violation_fraction <= delta,
                "per_index_mean_within_tolerance": mean_ok,
                "trace_identity_within_3se": trace_ok,
                "weyl_consistent": rep.weyl_violations == 0,
            },
        })
    Xt = uniform_design(tail_n, tail_d, seed, stream=1)
    u = rng.split(30).normal(tail_n)
    u /= np.linalg.norm(u)
    tail = conc.quadratic_form_tail_check(Xt, u, tail_p, tail_trials, rng.split(31))
    checks = {f"p={r['p']}:{name}": ok for r in reports for name, ok in r["checks"].items()}
    checks["tail_within_envelope"] = tail.violations == 0
    return {"X": X, "reports": reports, "tail": tail, "checks": checks,
            "passed": all(checks.values())}


# -- neural probes -----------------------------------------------------------------


@dataclass
class ProbeSettings:
    ratios: tuple = STANDARD_RATIOS
    learning_rates: tuple = STANDARD_LRS
    seeds: int = 5
    epochs: int = 5
    batch_size: int = 32
    hessian_iters: int = 100
    distance_lr: float = 1e-2
    distance_epochs: int = 200
    target_loss_fraction: float = 0.7
    epoch_grid: tuple = (1, 2, 4, 8, 16)
    small_lr_factor: float = 0.1
    compare_ratio: float = 0.1
    accuracy_gap: float = 0.02
    noise_allowance: float = 0.01
    task_seed: int = 0
    seed: int = 0
    workers: int = 1
    quadratic_head: bool = True
    extra: dict = field(default_factory=dict)


def _median(values):
    return float(np.median(values)) if values else math.nan


def _non_increasing(xs):
    return all(b <= a for a, b in zip(xs, xs[1:]))


def _non_decreasing(xs, slack=0.0):
    return all(b >= a - slack for a, b in zip(xs, xs[1:]))


def quadratic_head_check(seed: int = 0, n: int = 64, dim: int = 8) -> dict:
    """Power-method Hessian norm of a linear least-squares head against ``lam_1(X^T X) / n``."""
    task = linear_regression_task(n, dim, seed)
    model = MlpModel.init([dim, 1], RngStream(seed), activation="identity", loss="mse")
    model = attach_peft(model, ["full"], RngStream(seed))
    est = hessian_spectral_norm(model, task, iters=500, tol=1e-12, rng=RngStream(seed).split(5))
    exact = sym_eigen(task.X_train.T @ task.X_train)[0].top / n
    rel = abs(est.value - exact) / exact
    return {"estimate": est.value, "exact": exact, "relative_error": rel,
            "converged": est.converged, "passed": rel <= 1e-4}


def run_probe(settings: ProbeSettings, task_pair=None, pretrained=None) -> dict:
    """Curvature, distance and budget probes across trainable ratios.

    A sweep over ``learning_rates`` picks each ratio's best rate; full
    fine-tuning is swept alongside for the accuracy comparison.
    """
    base, target = task_pair or standard_task_pair(settings.task_seed)
    pretrained = pretrained or standard_pretrained(base, settings.task_seed)
    train = TrainConfig(lr=1e-3, epochs=settings.epochs, batch_size=settings.batch_size)
    grid = SweepGrid(settings.ratios, settings.learning_rates, settings.seeds, "random-mask",
                     train, hessian_iters=settings.hessian_iters, master_seed=settings.seed)
    records = run_sweep(grid, target, pretrained, settings.workers)
    full_grid = SweepGrid((1.0,), settings.learning_rates, settings.seeds, "full-ft", train,
                          master_seed=settings.seed)
    full_records = run_sweep(full_grid, target, pretrained, settings.workers)

    ratios = sorted(settings.ratios, reverse=True)
    best = {r: best_cell(records, r) for r in ratios}
    full_best = best_cell(full_records, 1.0)

    init_loss = pretrained.evaluate_loss(*target.train)
    target_loss = settings.target_loss_fraction * init_loss
    dist_cfg = train.replace(lr=settings.distance_lr, epochs=settings.distance_epochs)
    per_seed = []
    for ratio in ratios:
        specs = grid.layer_specs(len(pretrained.weights), ratio)
        for seed in range(settings.seeds):
            rng = RngStream(settings.seed).split(1000 + seed)
            model = attach_peft(pretrained, specs, rng.split(0))
            hess_init = next(r.hessian_norm for r in records if r.ratio == ratio and r.seed == seed)
            dist = distance_at_loss(model, target, dist_cfg, target_loss, rng.split(3))
            trained = model.copy()
            finetune(trained, target, train.replace(lr=best[ratio].lr), rng.split(1))
            hess_final = math.nan
            if settings.hessian_iters > 0:
                hess_final = hessian_spectral_norm(trained, target, settings.hessian_iters, 1e-6,
                                                   rng.split(2)).value
            per_seed.append({
                "ratio": ratio, "seed": seed, "trainable": model.n_trainable,
                "hessian_init": hess_init, "hessian_final": hess_final,
                "distance_at_target": dist.distance_from_init if dist.reached_target else math.nan,
                "reached_target": dist.reached_target, "steps_to_target": dist.steps,
            })

    medians = []
    for ratio in ratios:
        rows = [r for r in per_seed if r["ratio"] == ratio]
        medians.append({
            "ratio": ratio,
            "best_lr": best[ratio].lr,
            "best_mean_accuracy": best[ratio].mean_accuracy,
            "median_hessian_init": _median([r["hessian_init"] for r in rows]),
            "median_hessian_final": _median([r["hessian_final"] for r in rows]),
            "median_distance_at_target": _median([r["distance_at_target"] for r in rows]),
            "all_reached_target": all(r["reached_target"] for r in rows),
        })

    sparsest = ratios[-1]
    small_lr = settings.small_lr_factor * best[sparsest].lr
    specs = grid.layer_specs(len(pretrained.weights), sparsest)
    curves = []
    for seed in range(settings.seeds):
        rng = RngStream(settings.seed).split(1000 + seed)
        model = attach_peft(pretrained, specs, rng.split(0))
        curves.append(longer_training_probe(model, target, small_lr, settings.epoch_grid,
                                            rng.split(4), train))
    longer = []
    for k, epochs in enumerate(settings.epoch_grid):
        longer.append({
            "epochs": int(epochs),
            "mean_test_accuracy": float(np.mean([c[k].test_accuracy for c in curves])),
            "mean_train_accuracy": float(np.mean([c[k].train_accuracy for c in curves])),
            "mean_loss": float(np.mean([c[k].final_loss for c in curves])),
        })

    compare = best.get(settings.compare_ratio) or best_cell(records, settings.compare_ratio)
    checks = {
        "best_lr_non_decreasing": lr_verdict([best[r].lr for r in ratios]) != "not monotone",
        "median_hessian_init_non_increasing": _non_increasing([m["median_hessian_init"] for m in medians]),
        "median_distance_non_decreasing": all(m["all_reached_target"] for m in medians)
        and _non_decreasing([m["median_distance_at_target"] for m in medians]),
        "longer_training_non_decreasing": _non_decreasing(
            [row["mean_test_accuracy"] for row in longer], settings.noise_allowance),
        "masking_matches_full_ft": full_best.mean_accuracy - compare.mean_accuracy <= settings.accuracy_gap,
    }
    report = {
        "medians": medians,
        "per_seed": per_seed,
        "longer_training": {"ratio": sparsest, "lr": small_lr, "curve": longer},
        "full_ft": {"best_lr": full_best.lr, "best_mean_accuracy": full_best.mean_accuracy},
        "compare": {"ratio": compare.ratio, "best_lr": compare.lr,
                    "best_mean_accuracy": compare.mean_accuracy},
        "target_loss": target_loss,
        "trend": trend_report(records).to_dict() if len(ratios) > 1 else None,
        "checks": checks,
    }
    frozen = attach_peft(pretrained, ["frozen"] * len(pretrained.weights), RngStream(settings.seed))
    frozen_run = distance_at_loss(frozen, target, train, 0.0, RngStream(settings.seed))
    report["frozen"] = {
        "hessian_norm": hessian_spectral_norm(frozen, target).value,
        "distance_from_init": frozen_run.distance_from_init,
        "test_accuracy": frozen_run.test_accuracy,
    }
    if settings.quadratic_head:
        report["quadratic_head"] = quadratic_head_check(settings.seed)
        checks["quadratic_head_matches"] = report["quadratic_head"]["passed"]
    report["passed"] = all(checks.values())
    report["records"] = records + full_records
    return report
