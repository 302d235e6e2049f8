"""Reproducible output: run manifests, JSON reports and CSV tables.

Every file written for a run carries the hash of its resolved config, so a
table can be matched to the manifest that produced it. Wall-clock times
only appear when a config asks for them, which keeps reruns byte-identical.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def sanitize(obj):
    """JSON-safe copy: arrays become lists, non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if hasattr(obj, "to_dict"):
        return sanitize(obj.to_dict())
    return obj


def canonical_json(obj) -> str:
    return json.dumps(sanitize(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def versions() -> dict:
    import sklearn

    from . import __version__

    return {"randmask": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scikit-learn": sklearn.__version__}


def build_manifest(subcommand: str, config: dict, seed: int, record_timing: bool = False) -> dict:
    manifest = {
        "format_version": FORMAT_VERSION,
        "subcommand": subcommand,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": versions(),
        "argv": None,
    }
    if record_timing:
        manifest["argv"] = sys.argv[1:]
        manifest["timestamp"] = datetime.now(timezone.utc).isoformat()
    return manifest


def dumps_json(obj) -> str:
    return json.dumps(sanitize(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj))
    return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if v is None:
        return ""
    return v


def csv_text(header, rows, manifest: dict | None = None) -> str:
    """CSV with an optional ``# config_hash=... seed=...`` comment line."""
    buf = io.StringIO()
    if manifest is not None:
        buf.write(f"# config_hash={manifest['config_hash']} seed={manifest['seed']}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, manifest: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(csv_text(header, rows, manifest))
    return path


def dict_rows(records, header):
    return [[rec.get(k) for k in header] for rec in records]


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by :func:`write_csv`, comment lines skipped."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
