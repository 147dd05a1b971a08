"""Summary table: per-cell-line metrics aggregated per model and setup, top-value marking and rendering."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .training import SETUP_COLUMNS

REPORT_MODELS = ("SSL", "ICL", "WSL", "SSR")

METRICS = ("d", "D_inv", "accuracy", "precision", "recall", "roc_auc",
           "n_clusters", "not_noise_pct", "silhouette", "db_inv")


@dataclass(frozen=True)
class AggregationRule:
    center: str     # "median" | "mean"
    spread: str     # "mad" | "sd"
    transform: str  # "identity" | "reciprocal"
    decimals: int = 2


DEFAULT_RULES = {
    "d": AggregationRule("median", "mad", "identity"),
    "D_inv": AggregationRule("median", "mad", "reciprocal"),
    "accuracy": AggregationRule("median", "mad", "identity"),
    "precision": AggregationRule("median", "mad", "identity"),
    "recall": AggregationRule("median", "mad", "identity"),
    "roc_auc": AggregationRule("median", "mad", "identity"),
    "n_clusters": AggregationRule("mean", "sd", "identity", 0),
    "not_noise_pct": AggregationRule("mean", "sd", "identity", 0),
    "silhouette": AggregationRule("mean", "sd", "identity"),
    "db_inv": AggregationRule("mean", "sd", "reciprocal"),
}


def metric_labels(drug1: str = "MTX", drug2: str = "PTX") -> dict:
    return {
        "d": f"d({drug1}, {drug2})",
        "D_inv": f"D^-1({drug1}, {drug2})",
        "accuracy": "Accuracy",
        "precision": "Precision",
        "recall": "Recall",
        "roc_auc": "ROAUC",
        "n_clusters": "# clusters",
        "not_noise_pct": "Not noise, %",
        "silhouette": "Silhouette",
        "db_inv": "(Davies-Bouldin)^-1",
    }


@dataclass
class Cell:
    center: float = math.nan
    spread: float = math.nan
    n: int = 0
    bold: bool = False
    flags: list = field(default_factory=list)

    @property
    def missing(self) -> bool:
        return math.isnan(self.center)


@dataclass
class SummaryTable:
    cells: dict                      # (model, metric, column) -> Cell
    models: tuple = REPORT_MODELS
    metrics: tuple = METRICS
    columns: tuple = SETUP_COLUMNS
    labels: dict = field(default_factory=metric_labels)
    rules: dict = field(default_factory=lambda: dict(DEFAULT_RULES))

    def cell(self, model, metric, column) -> Cell:
        return self.cells[(model, metric, column)]

    def rows(self):
        """(model, metric, [Cell per column]) in display order: 10 metrics x 4 models."""
        for model in self.models:
            for metric in self.metrics:
                yield model, metric, [self.cells[(model, metric, c)] for c in self.columns]

    def equals(self, other: "SummaryTable") -> bool:
        if self.cells.keys() != other.cells.keys():
            return False
        for k, a in self.cells.items():
            b = other.cells[k]
            for x, y in ((a.center, b.center), (a.spread, b.spread)):
                if not (x == y or (math.isnan(x) and math.isnan(y))):
                    return False
            if (a.bold, a.n, a.flags) != (b.bold, b.n, b.flags):
                return False
        return True


def mad(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.median(np.abs(x - np.median(x))))


def aggregate_values(values, rule: AggregationRule) -> Cell:
    """Aggregate one cell's per-cell-line values (transform applied per value first)."""
    flags = []
    x = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if len(x) < len(values):
        flags.append("partial")
    x = x[~np.isnan(x)] if len(x) else x
    if rule.transform == "reciprocal":
        if np.any(x == 0):
            flags.append("zero_in_reciprocal")
            x = x[x != 0]
        x = 1.0 / x
    if len(x) == 0:
        return Cell(flags=flags + ["missing"])
    center = float(np.median(x)) if rule.center == "median" else float(np.mean(x))
    spread = mad(x) if rule.spread == "mad" else float(np.std(x))
    return Cell(center, spread, len(x), False, flags)


def _get(rec, key):
    v = rec.get(key) if isinstance(rec, dict) else getattr(rec, key, None)
    if v is None:
        return None
    return float(v)


def per_line_values(similarity=(), probe=(), clusters=()) -> dict:
    """Per-cell-line raw values for every metric row, before transforms."""
    probe = [p for p in probe if (p.get("cell_line") if isinstance(p, dict) else p.cell_line) != "ALL"]
    sel = list(clusters)
    return {
        "d": [_get(r, "d") for r in similarity],
        "D_inv": [_get(r, "D12") for r in similarity],
        "accuracy": [_get(p, "accuracy") for p in probe],
        "precision": [_get(p, "precision") for p in probe],
        "recall": [_get(p, "recall") for p in probe],
        "roc_auc": [_get(p, "roc_auc") for p in probe],
        "n_clusters": [_get(c, "n_clusters") for c in sel],
        "not_noise_pct": [None if _get(c, "noise_pct") is None else 100.0 - _get(c, "noise_pct") for c in sel],
        "silhouette": [_get(c, "silhouette") for c in sel],
        "db_inv": [_get(c, "davies_bouldin") for c in sel],
    }


def aggregate(similarity: dict, probe: dict, clusters: dict, rules: dict | None = None,
              labels: dict | None = None) -> SummaryTable:
    """Build the summary table.

    Each input maps (model, column) -> per-cell-line records: similarity
    records, probe metric rows and selected-partition rows. Missing cells
    are kept and flagged.
    """
    rules = rules or dict(DEFAULT_RULES)
    cells = {}
    for model in REPORT_MODELS:
        for column in SETUP_COLUMNS:
            key = (model, column)
            present = any(key in src for src in (similarity, probe, clusters))
            vals = per_line_values(similarity.get(key, ()), probe.get(key, ()), clusters.get(key, ()))
            for metric in METRICS:
                cell = aggregate_values(vals[metric], rules[metric])
                if not present and "missing" in cell.flags:
                    cell.flags = ["missing_run"]
                cells[(model, metric, column)] = cell
    return SummaryTable(cells, labels=labels or metric_labels(), rules=rules)


def _display_value(cell: Cell, rule: AggregationRule) -> float:
    return round(cell.center, rule.decimals)


def mark_top(table: SummaryTable, on_display: bool = True) -> SummaryTable:
    """Flag, per model and metric row, every column reaching the row maximum.

    With ``on_display`` values are compared after rounding to the printed
    precision, so visually tied entries are all flagged.
    """
    for model, metric, cells in table.rows():
        rule = table.rules[metric]
        vals = [math.nan if c.missing else (_display_value(c, rule) if on_display else c.center)
                for c in cells]
        finite = [v for v in vals if not math.isnan(v)]
        top = max(finite) if finite else None
        for c, v in zip(cells, vals):
            c.bold = top is not None and v == top
    return table


def _round_half_percent(p: float) -> float:
    return math.floor(p * 2.0 + 0.5) / 2.0


def total_bold(table: SummaryTable) -> dict:
    """Per column: {"count", "percent", "label"}; percent of the total number of flags."""
    counts = {c: 0 for c in table.columns}
    for _, _, cells in table.rows():
        for column, cell in zip(table.columns, cells):
            counts[column] += int(cell.bold)
    return tally_from_counts(counts)


def tally_from_counts(counts: dict) -> dict:
    total = sum(counts.values())
    out = {}
    for column, n in counts.items():
        pct = 100.0 * n / total if total else 0.0
        out[column] = {"count": n, "percent": pct,
                       "label": f"{n} ({_round_half_percent(pct):g}%)"}
    return out


# ---------------------------------------------------------------------------
# rendering


def format_cell(cell: Cell, rule: AggregationRule) -> str:
    if cell.missing:
        return "NA"
    d = rule.decimals
    return f"{cell.center:.{d}f} ± {cell.spread:.{d}f}"


def _num(v: float) -> str:
    return "NA" if math.isnan(v) else repr(float(v))


def summary_csv_columns(table: SummaryTable) -> list[str]:
    cols = ["model", "metric"]
    for c in table.columns:
        cols += [f"{c}:center", f"{c}:spread", f"{c}:n", f"{c}:bold", f"{c}:flags"]
    return cols


def write_summary_csv(table: SummaryTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(summary_csv_columns(table))
        for model, metric, cells in table.rows():
            row = [model, metric]
            for c in cells:
                row += [_num(c.center), _num(c.spread), c.n, int(c.bold), ";".join(c.flags)]
            w.writerow(row)


def read_summary_csv(path, labels: dict | None = None) -> SummaryTable:
    cells = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns = tuple(dict.fromkeys(h.split(":")[0] for h in reader.fieldnames[2:]))
        for row in reader:
            for c in columns:
                cells[(row["model"], row["metric"], c)] = Cell(
                    float("nan") if row[f"{c}:center"] == "NA" else float(row[f"{c}:center"]),
                    float("nan") if row[f"{c}:spread"] == "NA" else float(row[f"{c}:spread"]),
                    int(row[f"{c}:n"]),
                    row[f"{c}:bold"] == "1",
                    [f for f in row[f"{c}:flags"].split(";") if f],
                )
    return SummaryTable(cells, columns=columns, labels=labels or metric_labels())


def summary_markdown(table: SummaryTable) -> str:
    lines = ["| metric | " + " | ".join(table.columns) + " |",
             "|---|" + "---|" * len(table.columns)]
    current = None
    for model, metric, cells in table.rows():
        if model != current:
            lines.append(f"| **{model}** |" + " |" * len(table.columns))
            current = model
        rule = table.rules[metric]
        txt = [f"**{format_cell(c, rule)}**" if c.bold else format_cell(c, rule) for c in cells]
        lines.append(f"| {table.labels[metric]} | " + " | ".join(txt) + " |")
    tally = total_bold(table)
    lines.append("| **Total bold** | " + " | ".join(tally[c]["label"] for c in table.columns) + " |")
    return "\n".join(lines) + "\n"


def _bar_plot(table: SummaryTable, metric: str, path: Path, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(table.models), figsize=(3.2 * len(table.models), 3), sharey=True)
    for ax, model in zip(np.atleast_1d(axes), table.models):
        cells = [table.cell(model, metric, c) for c in table.columns]
        centers = [0.0 if c.missing else c.center for c in cells]
        spreads = [0.0 if c.missing else c.spread for c in cells]
        ax.bar(range(len(cells)), centers, yerr=spreads, capsize=3, color="0.6")
        ax.set_xticks(range(len(cells)), [c.replace("/", "\n") for c in table.columns], fontsize=7)
        ax.set_title(model)
    np.atleast_1d(axes)[0].set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _histogram_plot(rows: list[dict], path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    kinds = list(dict.fromkeys(r["kind"] for r in rows))
    fig, axes = plt.subplots(1, max(len(kinds), 1), figsize=(3.2 * max(len(kinds), 1), 2.8))
    for ax, kind in zip(np.atleast_1d(axes), kinds):
        for comp in ("S1-S2", "S1-C", "S2-C"):
            sel = [r for r in rows if r["kind"] == kind and r["comparison"] == comp]
            if not sel:
                continue
            lo = np.array([float(r["bin_lo"]) for r in sel])
            hi = np.array([float(r["bin_hi"]) for r in sel])
            cnt = np.array([float(r["count"]) for r in sel])
            dens = cnt / max(cnt.sum(), 1.0)
            ax.step(lo, dens, where="post", label=comp)
            ax.set_xlim(lo.min(), hi.max())
        ax.set_title(kind, fontsize=9)
    np.atleast_1d(axes)[0].legend(fontsize=7)
    fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def render(table: SummaryTable, out_dir, histograms: dict | None = None, plots: bool = True) -> list[Path]:
    """Write summary.csv, summary.md and figures; returns the written paths.

    ``histograms`` maps a setup id to histogram-table rows (kind, comparison, bin_lo, bin_hi, count).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "summary.csv", out / "summary.md"]
    write_summary_csv(table, written[0])
    written[1].write_text(summary_markdown(table))
    if plots:
        _bar_plot(table, "n_clusters", out / "clusters.png", "# clusters")
        _bar_plot(table, "silhouette", out / "silhouette.png", "Silhouette")
        written += [out / "clusters.png", out / "silhouette.png"]
        for name, rows in sorted((histograms or {}).items()):
            if rows:
                p = out / f"distances_{name}.png"
                _histogram_plot(rows, p, name)
                written.append(p)
    return written
