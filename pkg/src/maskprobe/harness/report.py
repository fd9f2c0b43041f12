"""Report emission: schema-versioned JSON and fixed-column CSV tables.

Attack table columns (one row per model and attack)::

    model_id, provenance, attack, loss_kind, epsilon, step, iters,
    clean_acc, adv_acc, mean_grad_l1, mean_feat_l1, seed

Sweep table columns (one row per trained cell)::

    model_id, method, eta, delta, epsilon, iters, clean_acc, pgd_acc,
    gpga_acc, gap, pgd_grad_l1, gpga_grad_l1, pgd_feat_l1, gpga_feat_l1,
    verdict, seed

Accuracies are fractions printed with 4 decimals; L1 statistics use 6
significant digits.  No timestamps are written, so identical runs give
identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .. import __version__
from ..errors import MaskProbeError

SCHEMA_VERSION = 1

ATTACK_COLUMNS = ("model_id", "provenance", "attack", "loss_kind", "epsilon", "step", "iters",
                  "clean_acc", "adv_acc", "mean_grad_l1", "mean_feat_l1", "seed")
SWEEP_COLUMNS = ("model_id", "method", "eta", "delta", "epsilon", "iters", "clean_acc", "pgd_acc",
                 "gpga_acc", "gap", "pgd_grad_l1", "gpga_grad_l1", "pgd_feat_l1", "gpga_feat_l1",
                 "verdict", "seed")
EPOCH_COLUMNS = ("method", "epoch", "lr", "loss")

_ACCURACY_FIELDS = {"clean_acc", "adv_acc", "pgd_acc", "gpga_acc", "gap"}
_STAT_FIELDS = {"mean_grad_l1", "mean_feat_l1", "pgd_grad_l1", "gpga_grad_l1", "pgd_feat_l1",
                "gpga_feat_l1", "loss"}


class ReportError(MaskProbeError):
    """A report could not be written."""


def format_cell(column: str, value) -> str:
    if value is None:
        return ""
    if column in _ACCURACY_FIELDS:
        return f"{float(value):.4f}"
    if column in _STAT_FIELDS:
        return f"{float(value):.6g}"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        missing = [c for c in columns if c not in row]
        if missing:
            raise ReportError(f"row is missing columns {missing}")
        writer.writerow([format_cell(c, row[c]) for c in columns])
    return buf.getvalue()


def envelope(experiment: str, config: dict, results: dict, complete: bool = True) -> dict:
    """Standard JSON report wrapper with provenance fields."""
    return {
        "schema_version": SCHEMA_VERSION,
        "toolkit_version": __version__,
        "experiment": experiment,
        "complete": complete,
        "config": config,
        "results": results,
    }


def _write(path: Path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def emit_report(report, fmt: str, path, columns=None) -> Path:
    """Write ``report`` as ``json`` (any JSON-able dict) or ``csv`` (list of rows)."""
    if fmt == "json":
        return _write(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    if fmt == "csv":
        return _write(path, render_csv(report, columns or ATTACK_COLUMNS))
    raise ReportError(f"unknown report format {fmt!r}")


def read_json_report(path) -> dict:
    return json.loads(Path(path).read_text())
