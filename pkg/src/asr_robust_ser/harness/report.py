"""CSV and Markdown rendering of benchmark rows."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

from .experiments import ResultRow

FIXED = ("corpus", "method", "source", "wer")


def metric_columns(rows: Sequence[ResultRow]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        for k in r.metrics:
            if k not in cols:
                cols.append(k)
    fold_cols = []
    for r in rows:
        for i, fold in enumerate(r.fold_metrics, start=1):
            for k in fold:
                name = f"{k}@fold{i}"
                if name not in fold_cols:
                    fold_cols.append(name)
    return cols + fold_cols


def _cell(row: ResultRow, col: str) -> float | str:
    if "@fold" in col:
        k, fold = col.split("@fold")
        i = int(fold) - 1
        return row.fold_metrics[i].get(k, "") if i < len(row.fold_metrics) else ""
    return row.metrics.get(col, "")


def render_csv(rows: Sequence[ResultRow]) -> str:
    cols = metric_columns(rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(FIXED) + cols + ["seed"])
    for r in rows:
        values = [_cell(r, c) for c in cols]
        writer.writerow([r.corpus, r.method, r.source, repr(r.wer)]
                        + [repr(v) if isinstance(v, float) else v for v in values] + [r.seed])
    return buf.getvalue()


def parse_csv(text: str) -> list[ResultRow]:
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for rec in reader:
        metrics = {}
        folds: dict[int, dict[str, float]] = {}
        for key, value in rec.items():
            if key in FIXED or key == "seed" or value == "":
                continue
            if "@fold" in key:
                name, i = key.split("@fold")
                folds.setdefault(int(i), {})[name] = float(value)
            else:
                metrics[key] = float(value)
        rows.append(ResultRow(rec["corpus"], rec["method"], rec["source"], float(rec["wer"]), metrics,
                              int(rec["seed"]), [folds[i] for i in sorted(folds)]))
    return rows


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def render_markdown(rows: Sequence[ResultRow], max_diff: dict[str, dict[str, float]] | None = None) -> str:
    """Mean metrics as a table with WER in percent; per-fold values in a second table."""
    cols = [c for c in metric_columns(rows) if "@fold" not in c]
    head = ["corpus", "method", "source", "WER (%)"] + cols + ["seed"]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    for r in rows:
        cells = [r.corpus, r.method, r.source, f"{100 * r.wer:.2f}"] + [_fmt(r.metrics.get(c, "")) for c in cols]
        lines.append("| " + " | ".join(cells + [str(r.seed)]) + " |")
    if max_diff:
        lines += ["", "Maximum diff (ground truth − ASR source):", ""]
        mcols = sorted({k for d in max_diff.values() for k in d})
        lines.append("| method | " + " | ".join(mcols) + " |")
        lines.append("|---|" + "|".join("---" for _ in mcols) + "|")
        for tech, d in max_diff.items():
            lines.append(f"| {tech} | " + " | ".join(_fmt(d.get(k, "")) for k in mcols) + " |")
    fold_rows = [r for r in rows if r.fold_metrics]
    if fold_rows:
        fcols = [c for c in metric_columns(rows) if "@fold" in c]
        lines += ["", "Per-fold:", "", "| method | source | " + " | ".join(fcols) + " |",
                  "|---|---|" + "|".join("---" for _ in fcols) + "|"]
        for r in fold_rows:
            lines.append(f"| {r.method} | {r.source} | " + " | ".join(_fmt(_cell(r, c)) for c in fcols) + " |")
    return "\n".join(lines) + "\n"


def emit_report(
    rows: Sequence[ResultRow],
    path: str | Path,
    fmt: str = "markdown",
    max_diff: dict[str, dict[str, float]] | None = None,
) -> Path:
    if not rows:
        raise ValueError("no rows to report")
    text = render_csv(rows) if fmt == "csv" else render_markdown(rows, max_diff)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
