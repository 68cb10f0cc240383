"""SVG plots and a markdown summary from ablation or evaluation CSV tables."""

from __future__ import annotations

import csv
import statistics
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from progdistill.errors import DataError  # noqa: E402

NUMERIC = ("fd", "energy", "sync", "nfe", "wall_ms", "nfe_per_sample", "lambda", "seed",
           "step_reduction", "dynamic_ts", "self_compare")
REQUIRED = ("fd", "nfe")


def read_table(path) -> tuple[list[str], list[dict]]:
    """Parse a metrics CSV; raises :class:`DataError` if empty or malformed."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            columns = list(reader.fieldnames or [])
            raw = list(reader)
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise DataError(f"cannot read table {path}: {exc}") from exc
    missing = [c for c in REQUIRED if c not in columns]
    if missing:
        raise DataError(f"table {path} lacks columns {missing}")
    if not raw:
        raise DataError(f"table {path} has no rows")
    rows = []
    for i, r in enumerate(raw, start=2):
        if None in r or any(v is None for v in r.values()):
            raise DataError(f"{path}:{i}: wrong number of fields")
        row = dict(r)
        for c in NUMERIC:
            if c in row:
                try:
                    row[c] = float(row[c])
                except ValueError as exc:
                    raise DataError(f"{path}:{i}: column {c} is not numeric: {row[c]!r}") from exc
        rows.append(row)
    return columns, rows


def _method(row) -> str:
    return row.get("cell_id") or row.get("method") or "model"


def _median_by(rows, key):
    groups = defaultdict(list)
    for r in rows:
        groups[key(r)].append(r["fd"])
    return {k: statistics.median(v) for k, v in sorted(groups.items())}


def _full_toggles(r) -> bool:
    return all(r.get(t, 1.0) == 1.0 for t in ("step_reduction", "dynamic_ts", "self_compare"))


def plot_fd_vs_nfe(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_method = defaultdict(list)
    for r in rows:
        by_method[_method(r)].append(r)
    for name, rs in sorted(by_method.items()):
        med = _median_by(rs, lambda r: r.get("nfe_per_sample", r["nfe"]))
        ax.plot(list(med), list(med.values()), marker="o", label=name)
    ax.set_xlabel("NFE per sample")
    ax.set_ylabel("Fréchet distance")
    if len(by_method) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_fd_vs_lambda(rows, path) -> bool:
    rs = [r for r in rows if "lambda" in r and _full_toggles(r) and r.get("loss_kind", "r3gan") == "r3gan"]
    if not rs:
        return False
    med = _median_by(rs, lambda r: r["lambda"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(med), list(med.values()), marker="o")
    ax.set_xlabel("self-compare weight λ")
    ax.set_ylabel("median Fréchet distance")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return True


def plot_loss_kinds(rows, path) -> bool:
    rs = [r for r in rows if "loss_kind" in r and _full_toggles(r)]
    if not rs:
        return False
    med = _median_by(rs, lambda r: r["loss_kind"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(list(med), list(med.values()))
    ax.set_ylabel("median Fréchet distance")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return True


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def markdown_summary(columns, rows) -> str:
    lines = ["# Results", "", "| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(_fmt(r[c]) for c in columns) + " |" for r in rows]
    med = _median_by(rows, _method)
    lines += ["", "## Median Fréchet distance per method", "", "| method | median fd |", "|---|---|"]
    lines += [f"| {k} | {v:.6g} |" for k, v in med.items()]
    return "\n".join(lines) + "\n"


def report(table_csv, plots_dir) -> list[Path]:
    """Write SVG plots and ``summary.md`` into ``plots_dir``; returns the files written."""
    columns, rows = read_table(table_csv)
    out = Path(plots_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "fd_vs_nfe.svg"]
    plot_fd_vs_nfe(rows, written[0])
    if plot_fd_vs_lambda(rows, out / "fd_vs_lambda.svg"):
        written.append(out / "fd_vs_lambda.svg")
    if plot_loss_kinds(rows, out / "loss_kinds.svg"):
        written.append(out / "loss_kinds.svg")
    summary = out / "summary.md"
    summary.write_text(markdown_summary(columns, rows))
    written.append(summary)
    return written
