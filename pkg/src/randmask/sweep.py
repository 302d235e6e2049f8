"""Grid search over (trainable ratio x learning rate x seed).

The unit of work is one ``(ratio, seed)`` group: its mask, batch order and
initial Hessian estimate depend only on the master seed and the seed
index, so every learning rate in the group sees the same mask and the
records do not depend on how groups are spread over workers.
"""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InvalidInputError, NoValidCellError
from .linalg import RngStream
from .sandbox import LayerSpec, MlpModel, SyntheticTask, TrainConfig, attach_peft, finetune
from .sandbox.probes import hessian_spectral_norm

METHODS = ("random-mask", "structured-mask", "lora", "full-ft")
DEFAULT_RATIOS = (1.0, 0.1, 0.01, 0.001)
DEFAULT_LRS = tuple(10.0**k for k in range(-6, 1))
RECORD_FIELDS = ("method", "ratio", "lr", "seed", "acc", "loss", "diverged", "distance",
                 "hessian_norm", "seconds", "train_acc", "trainable", "error")


@dataclass
class SweepGrid:
    ratios: tuple = DEFAULT_RATIOS
    learning_rates: tuple = DEFAULT_LRS
    seeds: int = 3
    method: str = "random-mask"
    train: TrainConfig = field(default_factory=TrainConfig)
    mask_mode: str = "exact-count"
    target_layers: tuple | None = None  # None: every layer except the output head
    lora_rank: int = 4
    lora_alpha: float = 8.0
    hessian_iters: int = 0               # 0 disables the initial-curvature probe
    master_seed: int = 0
    record_timing: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        self.ratios = tuple(float(r) for r in self.ratios)
        self.learning_rates = tuple(float(lr) for lr in self.learning_rates)
        if not self.ratios or not self.learning_rates or self.seeds < 1:
            raise InvalidInputError("grid must have at least one ratio, learning rate and seed")
        if any(not 0.0 < r <= 1.0 for r in self.ratios):
            raise InvalidInputError("ratios must lie in (0, 1]")
        if any(not lr > 0 for lr in self.learning_rates):
            raise InvalidInputError("learning rates must be positive")
        if self.method in ("lora", "full-ft"):
            # the ratio axis is meaningless here; one pseudo-ratio is swept
            self.ratios = (1.0,)

    def layer_specs(self, n_layers: int, ratio: float) -> list:
        targets = range(n_layers - 1) if self.target_layers is None else self.target_layers
        kind = {
            "random-mask": LayerSpec("masked", ratio, self.mask_mode),
            "structured-mask": LayerSpec("structured", ratio),
            "lora": LayerSpec("lora", rank=self.lora_rank, alpha=self.lora_alpha),
            "full-ft": LayerSpec("full"),
        }[self.method]
        return [kind if i in targets else LayerSpec("frozen") for i in range(n_layers)]


@dataclass
class SweepRecord:
    method: str
    ratio: float
    lr: float
    seed: int
    acc: float
    loss: float
    diverged: bool
    distance: float
    hessian_norm: float
    seconds: float
    train_acc: float = math.nan
    trainable: int = 0
    error: str = ""

    def row(self) -> list:
        out = []
        for name in RECORD_FIELDS:
            v = getattr(self, name)
            if isinstance(v, bool):
                out.append(int(v))
            elif isinstance(v, float):
                out.append(f"{v:.17g}")
            else:
                out.append(v)
        return out


def _group_rng(grid: SweepGrid, seed: int) -> RngStream:
    return RngStream(grid.master_seed).split(1000 + seed)


def _run_group(args):
    grid, target, pretrained, ratio, seed = args
    rng = _group_rng(grid, seed)
    try:
        base = attach_peft(pretrained, grid.layer_specs(len(pretrained.weights), ratio), rng.split(0))
    except Exception as exc:  # noqa: BLE001 - a bad cell must not abort the sweep
        return [SweepRecord(grid.method, ratio, lr, seed, math.nan, math.nan, True, math.nan,
                            math.nan, 0.0, error=repr(exc)) for lr in grid.learning_rates]
    hess = math.nan
    if grid.hessian_iters > 0:
        hess = hessian_spectral_norm(base, target, grid.hessian_iters, 1e-6, rng.split(2)).value
    records = []
    for lr in grid.learning_rates:
        start = time.perf_counter()
        model = base.copy()
        try:
            res = finetune(model, target, grid.train.replace(lr=lr), rng.split(1))
            rec = SweepRecord(grid.method, ratio, lr, seed, res.test_accuracy, res.final_loss,
                              res.diverged, res.distance_from_init, hess, 0.0,
                              res.train_accuracy, model.n_trainable)
        except Exception as exc:  # noqa: BLE001
            rec = SweepRecord(grid.method, ratio, lr, seed, math.nan, math.nan, True, math.nan,
                              hess, 0.0, trainable=model.n_trainable, error=repr(exc))
        if grid.record_timing:
            rec.seconds = time.perf_counter() - start
        records.append(rec)
    return records


def run_sweep(grid: SweepGrid, task: SyntheticTask, pretrained: MlpModel,
              workers: int = 1) -> list[SweepRecord]:
    """Fine-tune ``pretrained`` on ``task`` for every cell of ``grid``.

    Records come back ordered by (ratio, seed, lr) as listed in the grid.
    """
    if isinstance(task, tuple):
        task = task[1]  # (base, target) pair
    jobs = [(grid, task, pretrained, ratio, seed)
            for ratio in grid.ratios for seed in range(grid.seeds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(_run_group, jobs))
    else:
        groups = [_run_group(job) for job in jobs]
    return [rec for group in groups for rec in group]


def records_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_FIELDS)
    for rec in records:
        writer.writerow(rec.row())
    return buf.getvalue()


def read_records_csv(text: str) -> list[SweepRecord]:
    records = []
    for row in csv.DictReader(io.StringIO(text)):
        records.append(SweepRecord(
            method=row["method"], ratio=float(row["ratio"]), lr=float(row["lr"]),
            seed=int(row["seed"]), acc=float(row["acc"]), loss=float(row["loss"]),
            diverged=bool(int(row["diverged"])), distance=float(row["distance"]),
            hessian_norm=float(row["hessian_norm"]), seconds=float(row["seconds"]),
            train_acc=float(row["train_acc"]), trainable=int(row["trainable"]),
            error=row["error"],
        ))
    return records


@dataclass
class BestCell:
    ratio: float
    lr: float
    mean_accuracy: float
    seeds: int


def _at_ratio(records, ratio):
    return [r for r in records if math.isclose(r.ratio, ratio, rel_tol=1e-12)]


def best_cell(records, ratio: float) -> BestCell:
    """Learning rate with the highest mean test accuracy over seeds.

    Diverged records are skipped; ties go to the smaller learning rate.
    """
    valid = [r for r in _at_ratio(records, ratio) if not r.diverged and math.isfinite(r.acc)]
    if not valid:
        raise NoValidCellError(f"no non-diverged cell at ratio {ratio}")
    by_lr = {}
    for r in valid:
        by_lr.setdefault(r.lr, []).append(r.acc)
    best = None
    for lr in sorted(by_lr):
        mean = float(np.mean(by_lr[lr]))
        if best is None or mean > best.mean_accuracy:
            best = BestCell(ratio, lr, mean, len(by_lr[lr]))
    return best


@dataclass
class TrendRow:
    ratio: float
    best_lr: float | None
    mean_accuracy: float | None
    mean_distance: float | None
    mean_hessian_norm: float | None
    divergence_frontier: float | None


@dataclass
class TrendReport:
    rows: list
    verdict: str
    frontier_violations: list

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "verdict": self.verdict,
                "frontier_violations": self.frontier_violations}


def lr_verdict(best_lrs) -> str:
    """Classify learning rates listed in order of decreasing ratio."""
    pairs = list(zip(best_lrs, best_lrs[1:]))
    if all(b > a for a, b in pairs):
        return "monotone"
    if all(b >= a for a, b in pairs):
        return "monotone (non-strict)"
    return "not monotone"


def _nanmean(values):
    values = [v for v in values if math.isfinite(v)]
    return float(np.mean(values)) if values else None


def trend_report(records) -> TrendReport:
    """Per-ratio best learning rate, its accuracy and distance, and the divergence frontier."""
    ratios = sorted({r.ratio for r in records}, reverse=True)
    if len(ratios) < 2:
        raise InvalidInputError("trend report needs records from at least two ratios")
    rows = []
    violations = []
    for ratio in ratios:
        at = _at_ratio(records, ratio)
        diverged = sorted({r.lr for r in at if r.diverged})
        hess = _nanmean([r.hessian_norm for r in at])
        try:
            best = best_cell(records, ratio)
        except NoValidCellError:
            rows.append(TrendRow(ratio, None, None, None, hess, diverged[0] if diverged else None))
            continue
        dist = _nanmean([r.distance for r in at if r.lr == best.lr and not r.diverged])
        rows.append(TrendRow(ratio, best.lr, best.mean_accuracy, dist, hess,
                             diverged[0] if diverged else None))
        for seed in sorted({r.seed for r in at}):
            cells = sorted((r.lr, r.diverged) for r in at if r.seed == seed)
            first = next((lr for lr, d in cells if d), None)
            if first is not None:
                bad = [lr for lr, d in cells if lr > first and not d]
                if bad:
                    violations.append({"ratio": ratio, "seed": seed, "diverged_at": first,
                                       "stable_above": bad})
    best_lrs = [row.best_lr for row in rows if row.best_lr is not None]
    return TrendReport(rows, lr_verdict(best_lrs), violations)
