"""``randmask`` command line: theory, concentration, sweep and probe runs.

Exit status: 0 when every requested check passes, 1 when a check fails,
2 for usage or config errors and 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import config as config_mod
from . import experiments as ex
from . import io
from .config import ConfigError
from .exceptions import (
    ConvergenceError,
    InvalidInputError,
    NoValidCellError,
    NumericError,
    PreconditionError,
    PretrainingFailedError,
)
from .sandbox import TrainConfig
from .sweep import RECORD_FIELDS, SweepGrid, best_cell, run_sweep, trend_report

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class _Run:
    """Collects the files of one run and stamps each with the manifest.

    CSV files carry the config hash and seed in a comment line; JSON
    reports are written last so they can embed the complete manifest.
    """

    def __init__(self, command, cfg, out, record_timing=False):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = io.build_manifest(command, cfg, cfg["seed"], record_timing)
        self.manifest["outputs"] = []
        self._reports = {}

    def csv(self, name, header, rows):
        self.manifest["outputs"].append(name)
        io.write_csv(self.out / name, header, rows, self.manifest)

    def json(self, name, report):
        self.manifest["outputs"].append(name)
        self._reports[name] = report

    def finish(self):
        self.manifest["outputs"].append("manifest.json")
        for name, report in self._reports.items():
            io.write_json(self.out / name, {"manifest": self.manifest, **report})
        io.write_json(self.out / "manifest.json", self.manifest)


def cmd_theory(cfg, out, workers):
    run = _Run("theory", cfg, out)
    seed = cfg["seed"]
    report = {"checks": {}}
    if "closed_form" in cfg["checks"]:
        c = cfg["closed_form"]
        report["closed_form"] = ex.closed_form_check(c["instances"], tuple(c["steps"]), seed,
                                                     c["tolerance"])
    if "dichotomy" in cfg["checks"]:
        c = cfg["dichotomy"]
        report["dichotomy"] = ex.dichotomy_check(c["instances"], seed, c["below"], c["above"],
                                                 c["max_steps"], c["diverge_steps"],
                                                 c["loss_tolerance"])
    if "norm_bound" in cfg["checks"]:
        c = cfg["norm_bound"]
        report["norm_bound"] = ex.norm_bound_check(c["instances"], c["trials"], c["sigma"], seed)
    for name in cfg["checks"]:
        report["checks"][name] = report[name]["passed"]
    report["passed"] = all(report["checks"].values())
    traj = ex.sample_trajectory(seed, cfg["trajectory"]["eta_factor"], cfg["trajectory"]["steps"])
    run.csv("trajectory.csv", ("step", "loss"), list(enumerate(traj.losses)))
    run.json("theory_report.json", report)
    run.finish()
    return report["passed"]


def _p_label(p):
    return f"{p:g}"


def cmd_concentration(cfg, out, workers):
    run = _Run("concentration", cfg, out)
    tail = cfg["tail"]
    suite = ex.concentration_suite(cfg["n"], cfg["d"], tuple(cfg["ps"]), cfg["trials"],
                                   cfg["delta"], cfg["trace_trials"], tail["n"], tail["d"],
                                   tail["p"], tail["trials"], cfg["mean_tolerance"], cfg["seed"])
    for rep in suite["reports"]:
        header, rows = rep["deviation"].csv_rows()
        run.csv(f"concentration_p{_p_label(rep['p'])}.csv", header, rows)
    t = suite["tail"]
    run.csv("tail.csv", ("s", "empirical_tail", "envelope", "band"),
            list(zip(t.s_grid, t.empirical_tail, t.envelope, t.band)))
    report = {
        "reports": [{"p": r["p"], "deviation": r["deviation"], "trace": r["trace"],
                     "checks": r["checks"]} for r in suite["reports"]],
        "tail": t,
        "checks": suite["checks"],
        "passed": suite["passed"],
    }
    run.json("concentration_report.json", report)
    run.finish()
    return suite["passed"]


def _train_config(c):
    return TrainConfig(**c)


def cmd_sweep(cfg, out, workers):
    run = _Run("sweep", cfg, out, cfg["record_timing"])
    base, target = ex.standard_task_pair(cfg["task_seed"])
    pretrained = ex.standard_pretrained(base, cfg["task_seed"])
    grid = SweepGrid(tuple(cfg["ratios"]), tuple(cfg["learning_rates"]), cfg["seeds"],
                     cfg["method"], _train_config(cfg["train"]), cfg["mask_mode"],
                     lora_rank=cfg["lora_rank"], lora_alpha=cfg["lora_alpha"],
                     hessian_iters=cfg["hessian_iters"], master_seed=cfg["seed"],
                     record_timing=cfg["record_timing"])
    records = run_sweep(grid, target, pretrained, workers)
    run.csv("sweep_records.csv", RECORD_FIELDS, [r.row() for r in records])
    if len(grid.ratios) >= 2:
        trend = trend_report(records).to_dict()
        passed = trend["verdict"] != "not monotone" and all(
            row["best_lr"] is not None for row in trend["rows"])
    else:
        try:
            best = dataclasses.asdict(best_cell(records, grid.ratios[0]))
            passed = True
        except NoValidCellError:
            best, passed = None, False
        trend = {"rows": [best], "verdict": None, "frontier_violations": []}
    run.json("trend_report.json", {"trend": trend, "passed": passed})
    run.finish()
    return passed


_PROBE_ONLY = {"ratios", "learning_rates", "epoch_grid"}


def cmd_probe(cfg, out, workers):
    run = _Run("probe", cfg, out)
    fields = {f.name for f in dataclasses.fields(ex.ProbeSettings)}
    kwargs = {k: (tuple(v) if k in _PROBE_ONLY else v) for k, v in cfg.items() if k in fields}
    settings = ex.ProbeSettings(**kwargs, workers=workers)
    report = ex.run_probe(settings)
    records = report.pop("records")
    med_header = ("ratio", "best_lr", "best_mean_accuracy", "median_hessian_init",
                  "median_hessian_final", "median_distance_at_target", "all_reached_target")
    run.csv("medians.csv", med_header, io.dict_rows(report["medians"], med_header))
    seed_header = ("ratio", "seed", "trainable", "hessian_init", "hessian_final",
                   "distance_at_target", "reached_target", "steps_to_target")
    run.csv("hessian_by_ratio.csv", seed_header, io.dict_rows(report["per_seed"], seed_header))
    curve_header = ("epochs", "mean_test_accuracy", "mean_train_accuracy", "mean_loss")
    run.csv("longer_training.csv", curve_header,
            io.dict_rows(report["longer_training"]["curve"], curve_header))
    run.csv("probe_records.csv", RECORD_FIELDS, [r.row() for r in records])
    run.json("probe_report.json", report)
    run.finish()
    return report["passed"]


COMMANDS = {"theory": cmd_theory, "concentration": cmd_concentration,
            "sweep": cmd_sweep, "probe": cmd_probe}


def _u64(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="randmask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH",
                       help="JSON config, or a manifest.json from an earlier run")
        p.add_argument("--seed", type=_u64, help="master seed, overrides the config")
        p.add_argument("--workers", type=_positive, default=os.cpu_count() or 1)
        p.add_argument("--out", metavar="DIR", default=f"randmask-{name}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = config_mod.load(args.command, args.config) if args.config else config_mod.resolve(args.command)
        if args.seed is not None:
            cfg["seed"] = args.seed
        passed = COMMANDS[args.command](cfg, args.out, args.workers)
    except (ConfigError, InvalidInputError, PreconditionError) as exc:
        print(f"randmask {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, NumericError, PretrainingFailedError, FloatingPointError) as exc:
        print(f"randmask {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NoValidCellError as exc:
        print(f"randmask {args.command}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    status = "passed" if passed else "FAILED"
    print(f"randmask {args.command}: checks {status}; outputs in {args.out}")
    return EXIT_OK if passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
