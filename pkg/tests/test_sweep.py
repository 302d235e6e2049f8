import math

import pytest

from randmask.exceptions import InvalidInputError, NoValidCellError
from randmask.linalg import RngStream
from randmask.sandbox import TrainConfig, gaussian_mixture_pair, pretrain
from randmask.sweep import (
    SweepGrid,
    SweepRecord,
    best_cell,
    lr_verdict,
    read_records_csv,
    records_csv,
    run_sweep,
    trend_report,
)


@pytest.fixture(scope="module")
def setup():
    base, target = gaussian_mixture_pair(dim=8, n_classes=3, n_train=128, n_test=256, seed=2)
    model = pretrain(base, hidden=(16,), cfg=TrainConfig(lr=1e-2, epochs=100), rng=RngStream(0))
    return target, model


def _rec(ratio, lr, seed, acc, diverged=False):
    return SweepRecord("random-mask", ratio, lr, seed, acc, 0.5, diverged, 1.0, math.nan, 0.0)


def test_single_cell(setup):
    target, model = setup
    grid = SweepGrid((0.1,), (1e-2,), 1, train=TrainConfig(epochs=1))
    records = run_sweep(grid, target, model)
    assert len(records) == 1
    assert records_csv(records).count("\n") == 2


def test_sweep_is_reproducible_across_workers(setup):
    target, model = setup
    grid = SweepGrid((1.0, 0.1), (1e-2, 1e-1), 2, train=TrainConfig(epochs=1), hessian_iters=5)
    one = records_csv(run_sweep(grid, target, model, workers=1))
    assert one == records_csv(run_sweep(grid, target, model, workers=1))
    assert one == records_csv(run_sweep(grid, target, model, workers=2))


def test_records_roundtrip(setup):
    target, model = setup
    grid = SweepGrid((0.5,), (1e-2, 1e-1), 1, train=TrainConfig(epochs=1))
    records = run_sweep(grid, target, model)
    again = read_records_csv(records_csv(records))
    assert records_csv(again) == records_csv(records)


def test_same_mask_across_learning_rates(setup):
    target, model = setup
    grid = SweepGrid((0.1,), (1e-3, 1e-2), 1, train=TrainConfig(epochs=1))
    records = run_sweep(grid, target, model)
    assert records[0].trainable == records[1].trainable == round(0.1 * 8 * 16)


@pytest.mark.parametrize("method", ["structured-mask", "lora", "full-ft"])
def test_other_methods(setup, method):
    target, model = setup
    grid = SweepGrid((0.5, 0.1), (1e-2,), 1, method=method, train=TrainConfig(epochs=1),
                     lora_rank=2)
    records = run_sweep(grid, target, model)
    assert all(not r.error for r in records)
    if method in ("lora", "full-ft"):
        assert grid.ratios == (1.0,) and len(records) == 1


def test_grid_validation():
    with pytest.raises(InvalidInputError):
        SweepGrid(method="adapters")
    with pytest.raises(InvalidInputError):
        SweepGrid(ratios=(0.0,))
    with pytest.raises(InvalidInputError):
        SweepGrid(learning_rates=(-1.0,))


def test_best_cell_rules():
    assert best_cell([_rec(0.1, 1e-2, 0, 0.7)], 0.1).lr == 1e-2
    tie = [_rec(0.1, 1e-1, 0, 0.8), _rec(0.1, 1e-2, 0, 0.8)]
    assert best_cell(tie, 0.1).lr == 1e-2
    # means: 1e-3 -> 0.6, 1e-2 -> 0.75, 1e-1 -> 0.7
    records = [_rec(0.1, 1e-3, s, a) for s, a in enumerate((0.5, 0.7))]
    records += [_rec(0.1, 1e-2, s, a) for s, a in enumerate((0.8, 0.7))]
    records += [_rec(0.1, 1e-1, s, a) for s, a in enumerate((0.9, 0.5))]
    records.append(_rec(0.1, 1.0, 0, 0.99, diverged=True))
    best = best_cell(records, 0.1)
    assert best.lr == 1e-2 and best.mean_accuracy == pytest.approx(0.75)
    with pytest.raises(NoValidCellError):
        best_cell([_rec(0.1, 1.0, 0, math.nan, diverged=True)], 0.1)


def test_trend_report():
    with pytest.raises(InvalidInputError):
        trend_report([_rec(0.1, 1e-2, 0, 0.5)])
    records = [_rec(1.0, 1e-3, 0, 0.9), _rec(1.0, 1e-2, 0, 0.8),
               _rec(0.1, 1e-3, 0, 0.7), _rec(0.1, 1e-2, 0, 0.9),
               _rec(0.01, 1e-2, 0, 0.6), _rec(0.01, 1e-1, 0, 0.8)]
    rep = trend_report(records)
    assert [r.best_lr for r in rep.rows] == [1e-3, 1e-2, 1e-1]
    assert rep.verdict == "monotone"
    frontier = [_rec(1.0, 1e-2, 0, 0.5, diverged=True), _rec(1.0, 1e-1, 0, 0.5),
                _rec(1.0, 1e-3, 0, 0.6), _rec(0.1, 1e-3, 0, 0.6)]
    rep = trend_report(frontier)
    assert rep.frontier_violations == [{"ratio": 1.0, "seed": 0, "diverged_at": 1e-2,
                                        "stable_above": [1e-1]}]


def test_lr_verdict():
    assert lr_verdict([1e-3, 1e-2, 1e-1]) == "monotone"
    assert lr_verdict([1e-3, 1e-2, 1e-2]) == "monotone (non-strict)"
    assert lr_verdict([1e-2, 1e-3]) == "not monotone"
