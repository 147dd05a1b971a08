"""Drug-vs-control probe on frozen embeddings and per-cell-line classification metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import rankdata

from .embeddings import EmbeddingSet
from .errors import ConfigError, DataError

POOLED = "ALL"


@dataclass
class ProbeConfig:
    hidden_units: int = 256
    epochs: int = 25
    batch_size: int = 1024
    learning_rates: list = field(default_factory=lambda: [0.1, 0.01, 0.001])
    momenta: list = field(default_factory=lambda: [0.0, 0.9])
    weight_decays: list = field(default_factory=lambda: [0.0, 1e-4, 1e-3])

    def __post_init__(self):
        if not (self.learning_rates and self.momenta and self.weight_decays):
            raise ConfigError("probe grid sets must be non-empty")

    def grid(self) -> list[dict]:
        return [{"lr": lr, "momentum": m, "weight_decay": wd}
                for lr, m, wd in product(self.learning_rates, self.momenta, self.weight_decays)]


class Probe(nn.Module):
    """Standardize with training statistics, then latent -> hidden -> 2 with ReLU in between."""

    def __init__(self, latent_dim: int, hidden_units: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(latent_dim))
        self.register_buffer("scale", torch.ones(latent_dim))
        self.net = nn.Sequential(nn.Linear(latent_dim, hidden_units), nn.ReLU(), nn.Linear(hidden_units, 2))

    def forward(self, x):
        return self.net((x - self.mean) / self.scale)

    @torch.no_grad()
    def scores(self, x) -> np.ndarray:
        """Softmax outputs, N x 2 (column 1 = drug)."""
        x = torch.as_tensor(np.array(x, dtype=np.float32))
        return torch.softmax(self(x), dim=1).numpy().astype(np.float64)


def train_probe(train_embeddings, train_labels, config: ProbeConfig, hyperparams: dict,
                seed: int = 0) -> Probe:
    """SGD-train a two-layer head for ``config.epochs`` epochs; deterministic given seed."""
    x = torch.as_tensor(np.array(train_embeddings, dtype=np.float32))
    y = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    if x.ndim != 2 or len(x) != len(y):
        raise DataError("embeddings and labels do not align")
    if len(torch.unique(y)) < 2:
        raise DataError("probe training needs both labels")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    probe = Probe(x.shape[1], config.hidden_units)
    probe.mean.copy_(x.mean(0))
    probe.scale.copy_(x.std(0, unbiased=False).clamp_min(1e-6))
    opt = torch.optim.SGD(probe.parameters(), lr=hyperparams["lr"], momentum=hyperparams["momentum"],
                          weight_decay=hyperparams["weight_decay"])
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(config.epochs):
        order = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = loss_fn(probe(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return probe


def _accuracy(probe: Probe, x, y) -> float:
    s = probe.scores(x)
    if not np.all(np.isfinite(s)):
        return 0.0
    return float(np.mean((s[:, 1] > 0.5).astype(np.int64) == np.asarray(y)))


def grid_search_probe(embeddings: EmbeddingSet, split, config: ProbeConfig, seed: int = 0):
    """Train one probe per grid point; keep the best validation accuracy.

    Ties go to lower learning rate, then lower weight decay, then lower momentum.
    Returns (best hyperparams, probe, grid log rows).
    """
    split = split or embeddings.split
    if split is None:
        raise DataError("grid search needs a train/validation split")
    tr, va = embeddings.rows(split.train_ids), embeddings.rows(split.val_ids)
    X, y = embeddings.matrix, embeddings.labels
    for name, idx in (("train", tr), ("validation", va)):
        if len(np.unique(y[idx])) < 2:
            raise DataError(f"{name} part of the split lacks one label")
    grid = config.grid()
    if not grid:
        raise ConfigError("empty probe grid")
    rows, probes = [], []
    for hp in grid:
        probe = train_probe(X[tr], y[tr], config, hp, seed)
        rows.append({**hp, "train_accuracy": _accuracy(probe, X[tr], y[tr]),
                     "val_accuracy": _accuracy(probe, X[va], y[va])})
        probes.append(probe)
    best = min(range(len(grid)), key=lambda i: (-rows[i]["val_accuracy"], grid[i]["lr"],
                                                grid[i]["weight_decay"], grid[i]["momentum"]))
    for i, r in enumerate(rows):
        r["selected"] = i == best
    return grid[best], probes[best], rows


# ---------------------------------------------------------------------------
# metrics


def roc_auc_rank(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), via mid-ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ClassificationMetrics:
    cell_line: str
    accuracy: float
    precision: float
    recall: float
    roc_auc: float
    n_drug: int
    n_control: int
    flags: list = field(default_factory=list)

    def row(self, **extra) -> dict:
        d = {**extra, **asdict(self)}
        d["flags"] = ";".join(self.flags)
        for k in ("accuracy", "precision", "recall", "roc_auc"):
            d[k] = "NA" if math.isnan(d[k]) else repr(d[k])
        return d


def _metrics(name: str, p_drug: np.ndarray, y: np.ndarray) -> ClassificationMetrics:
    pred = (p_drug > 0.5).astype(np.int64)  # exactly 0.5 counts as control
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("no_positive_predictions")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = float("nan")
        flags.append("no_drug_samples")
    else:
        recall = tp / (tp + fn)
    auc = roc_auc_rank(p_drug, y)
    if math.isnan(auc):
        flags.append("single_class")
    return ClassificationMetrics(name, float(np.mean(pred == y)), precision, recall, auc,
                                 int(np.sum(y == 1)), int(np.sum(y == 0)), flags)


def compute_classification_metrics(scores, labels, metadata) -> list[ClassificationMetrics]:
    """Accuracy/precision/recall at threshold 0.5 and rank ROC-AUC, per cell line then pooled.

    ``scores`` are N x 2 softmax outputs; the drug class (label 1) is positive.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.ndim != 2 or s.shape[1] != 2 or len(s) != len(y) or len(y) != len(metadata):
        raise DataError("scores, labels and metadata must align (scores N x 2)")
    lines = list(dict.fromkeys(m.cell_line for m in metadata))
    cell = np.array([m.cell_line for m in metadata])
    out = [_metrics(line, s[cell == line, 1], y[cell == line]) for line in lines]
    out.append(_metrics(POOLED, s[:, 1], y))
    return out


PROBE_COLUMNS = ("model", "setup", "cell_line", "accuracy", "precision", "recall", "roc_auc",
                 "n_drug", "n_control", "flags")
GRID_COLUMNS = ("lr", "momentum", "weight_decay", "train_accuracy", "val_accuracy", "selected")


def evaluate_probe(embeddings: EmbeddingSet, config: ProbeConfig, seed: int = 0):
    """Grid-search a pooled probe and score the validation rows per cell line.

    Returns (metrics list, grid rows, best hyperparams).
    """
    hp, probe, grid_rows = grid_search_probe(embeddings, embeddings.split, config, seed)
    va = embeddings.rows(embeddings.split.val_ids)
    scores = probe.scores(embeddings.matrix[va])
    metrics = compute_classification_metrics(scores, embeddings.labels[va],
                                             [embeddings.meta[i] for i in va])
    return metrics, grid_rows, hp


def write_probe_outputs(metrics, grid_rows, out_dir, model: str = "", setup: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "probe_metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PROBE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for m in metrics:
            w.writerow(m.row(model=model, setup=setup))
    with open(out / "probe_grid.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in grid_rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_probe_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("accuracy", "precision", "recall", "roc_auc"):
            r[k] = float("nan") if r[k] == "NA" else float(r[k])
    return rows
