"""Render metrics CSVs as a Model x Method table and as plot-ready rows."""

from __future__ import annotations

import csv
import io
import math

from .errors import FormatError
from .geo import ENCODERS

MODEL_LABELS = {
    "mlp": "MLP",
    "cnn": "CNN",
    "sst": "SST",
    "sst-shifted": "Swin (shifted)",
    "lstm": "LSTM",
}
CORNER = "Model \\ Method"


def parse_metrics_csv(text: str):
    from .train import MetricsTable

    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise FormatError("metrics CSV is empty") from None
    if header != ["model", "encoder", "mse"]:
        raise FormatError(f"metrics CSV header must be model,encoder,mse; got {','.join(header)}")
    table = MetricsTable()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise FormatError(f"metrics CSV line {lineno}: expected 3 fields, got {len(row)}")
        model, encoder, value = (x.strip() for x in row)
        try:
            mse = float(value)
        except ValueError:
            raise FormatError(f"metrics CSV line {lineno}: mse {value!r} is not a number") from None
        table.rows.append((model, encoder, mse))
    if not table.rows:
        raise FormatError("metrics CSV has no data rows")
    return table


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


def render_table(table) -> str:
    """Aligned text table; a model without per-encoder cells spans all columns."""
    models: list[str] = []
    for m, _, _ in table.rows:
        if m not in models:
            models.append(m)
    cols = [e.capitalize() for e in ENCODERS]
    cells: dict[str, dict[str, str]] = {m: {} for m in models}
    for m, e, v in table.rows:
        cells[m][e] = _fmt(v)
    width = max(8, *(len(_fmt(v)) for _, _, v in table.rows))
    col_w = [max(width, len(c)) for c in cols]
    label_w = max(len(CORNER), *(len(MODEL_LABELS.get(m, m)) for m in models))
    span_w = sum(col_w) + 3 * (len(cols) - 1)

    lines = [" | ".join([CORNER.ljust(label_w)] + [c.rjust(w) for c, w in zip(cols, col_w)])]
    lines.append("-+-".join(["-" * label_w] + ["-" * w for w in col_w]))
    for m in models:
        label = MODEL_LABELS.get(m, m).ljust(label_w)
        row = cells[m]
        if any(e in row for e in ENCODERS):
            vals = [row.get(e, "-").rjust(w) for e, w in zip(ENCODERS, col_w)]
            lines.append(" | ".join([label] + vals))
        else:
            value = next(iter(row.values()))
            lines.append(f"{label} | {value.center(span_w).rstrip()}")
    return "\n".join(lines) + "\n"


def plot_rows_csv(table) -> str:
    """Rows of (encoder, model, mse) for external bar plots."""
    lines = ["encoder,model,mse"]
    lines += [f"{e},{m},{v!r}" for m, e, v in table.rows]
    return "\n".join(lines) + "\n"
