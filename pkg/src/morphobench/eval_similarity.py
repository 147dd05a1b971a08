"""Distance-based drug similarity: median cross-set distances and the normalized difference d.

For drug sets S1, S2 and a control set C within one cell line,

    D(A, B) = median over u in A, v in B of dist(u, v)
    d       = (D_hat - D(S1, S2)) / D_hat,   D_hat = (D(S1, C) + D(S2, C)) / 2

so d > 0 when the two drugs sit closer to each other than to the controls.
"""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSet, val_rows
from .errors import DataError, InapplicableDistance, NumericalError

log = logging.getLogger(__name__)

DISTANCE_KINDS = ("euclidean", "cosine", "correlation", "braycurtis")
COMPARISONS = ("S1-S2", "S1-C", "S2-C")
_CHUNK_ELEMENTS = 1 << 22


def _check_kind(kind: str) -> None:
    if kind not in DISTANCE_KINDS:
        raise ValueError(f"unknown distance kind {kind!r}; expected one of {DISTANCE_KINDS}")


def _distance_block(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    """|a| x |b| distances; reductions run along the contiguous last axis."""
    if kind == "euclidean":
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))
    if kind == "braycurtis":
        num = np.sum(np.abs(a[:, None, :] - b[None, :, :]), axis=-1)
        den = np.sum(a[:, None, :] + b[None, :, :], axis=-1)
        if np.any(den == 0):
            raise NumericalError("Bray-Curtis undefined for two all-zero vectors")
        return num / den
    if kind == "correlation":
        a = a - a.mean(axis=1, keepdims=True)
        b = b - b.mean(axis=1, keepdims=True)
    na = np.sqrt(np.sum(a * a, axis=-1))
    nb = np.sqrt(np.sum(b * b, axis=-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericalError(f"zero-norm row under {kind} distance")
    dot = np.sum(a[:, None, :] * b[None, :, :], axis=-1)
    return np.clip(1.0 - dot / (na[:, None] * nb[None, :]), 0.0, 2.0)


def pairwise_distances(A, B, kind: str = "euclidean") -> np.ndarray:
    """All |A| x |B| cross distances in double precision."""
    _check_kind(kind)
    a = np.asarray(A, dtype=np.float64)
    b = np.asarray(B, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError(f"incompatible row sets {a.shape} and {b.shape}")
    if len(a) == 0 or len(b) == 0:
        raise DataError("empty row set")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DataError("non-finite embedding rows")
    if kind == "braycurtis" and (np.any(a < 0) or np.any(b < 0)):
        raise InapplicableDistance("Bray-Curtis requires non-negative components")
    step = max(1, _CHUNK_ELEMENTS // (len(b) * a.shape[1]))
    return np.concatenate([_distance_block(a[i:i + step], b, kind) for i in range(0, len(a), step)])


def pairwise_median_distance(A, B, kind: str = "euclidean") -> float:
    """Median of all cross-pair distances; even counts average the two central values."""
    return float(np.median(pairwise_distances(A, B, kind)))


def normalized_difference(D12: float, D1C: float, D2C: float) -> float:
    d_hat = 0.5 * (D1C + D2C)
    if not d_hat > 0:
        raise NumericalError("degenerate control geometry: mean drug-to-control distance is 0")
    return (d_hat - D12) / d_hat


@dataclass
class SimilarityRecord:
    cell_line: str
    kind: str
    D12: float
    D1C: float
    D2C: float
    d: float
    n_pairs: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def D_hat(self) -> float:
        return 0.5 * (self.D1C + self.D2C)

    def row(self) -> dict:
        return {
            "cell_line": self.cell_line, "kind": self.kind,
            "D12": repr(self.D12), "D1C": repr(self.D1C), "D2C": repr(self.D2C), "d": repr(self.d),
            "n_pairs": ";".join(str(self.n_pairs.get(c, 0)) for c in COMPARISONS),
            "flags": ";".join(self.flags),
        }


def _line_rng(seed: int, cell_line: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(cell_line.encode())])


def _sets_for_line(emb: EmbeddingSet, rows: np.ndarray, cell_line: str, drug1: str, drug2: str,
                   control_marker: str, seed: int):
    line_rows = [i for i in rows if emb.meta[i].cell_line == cell_line]
    s1 = np.array([i for i in line_rows if emb.meta[i].drug == drug1], dtype=np.int64)
    s2 = np.array([i for i in line_rows if emb.meta[i].drug == drug2], dtype=np.int64)
    ctrl = np.array([i for i in line_rows if emb.meta[i].drug == control_marker], dtype=np.int64)
    flags = []
    if len(s1) == 0 or len(s2) == 0 or len(ctrl) == 0:
        return None
    want = len(s1) + len(s2)
    if len(ctrl) < want:
        flags.append("insufficient_controls")
        c = ctrl
    else:
        c = np.sort(_line_rng(seed, cell_line).choice(ctrl, size=want, replace=False))
    return s1, s2, c, flags


def drug_similarity_analysis(embeddings: EmbeddingSet, drug1: str, drug2: str,
                             control_marker: str = "DMSO", kind: str = "euclidean", seed: int = 0,
                             use_validation_rows: bool = True) -> list[SimilarityRecord]:
    """Per-cell-line D(S1,S2), D(S1,C), D(S2,C) and d on validation rows.

    Controls are subsampled to |S1| + |S2| per cell line; cell lines missing
    either drug or controls are skipped.
    """
    _check_kind(kind)
    rows = val_rows(embeddings) if use_validation_rows else np.arange(len(embeddings))
    X = embeddings.matrix
    records = []
    for line in embeddings.cell_lines:
        sets = _sets_for_line(embeddings, rows, line, drug1, drug2, control_marker, seed)
        if sets is None:
            log.warning("cell line %s lacks %s, %s or %s rows; skipped", line, drug1, drug2, control_marker)
            continue
        s1, s2, c, flags = sets
        n_pairs = {"S1-S2": len(s1) * len(s2), "S1-C": len(s1) * len(c), "S2-C": len(s2) * len(c)}
        try:
            D12 = pairwise_median_distance(X[s1], X[s2], kind)
            D1C = pairwise_median_distance(X[s1], X[c], kind)
            D2C = pairwise_median_distance(X[s2], X[c], kind)
        except InapplicableDistance:
            records.append(SimilarityRecord(line, kind, np.nan, np.nan, np.nan, np.nan, n_pairs,
                                            flags + ["inapplicable"]))
            continue
        try:
            d = normalized_difference(D12, D1C, D2C)
        except NumericalError:
            d = float("nan")
            flags = flags + ["degenerate_control_geometry"]
        records.append(SimilarityRecord(line, kind, D12, D1C, D2C, d, n_pairs, flags))
    return records


@dataclass
class KindComparison:
    """Full distance multisets per kind and comparison, plus their medians."""

    distances: dict
    medians: dict
    inapplicable: list

    def histogram_rows(self, bins: int = 30) -> list[dict]:
        rows = []
        for kind, comps in self.distances.items():
            values = np.concatenate(list(comps.values()))
            lo, hi = float(values.min()), float(values.max())
            if hi == lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, bins + 1)
            for comp, vals in comps.items():
                counts, _ = np.histogram(vals, bins=edges)
                for j, cnt in enumerate(counts):
                    rows.append({"kind": kind, "comparison": comp, "bin_lo": repr(float(edges[j])),
                                 "bin_hi": repr(float(edges[j + 1])), "count": int(cnt)})
        return rows


def distance_kind_comparison(embeddings: EmbeddingSet, drug1: str, drug2: str,
                             control_marker: str = "DMSO", seed: int = 0, *,
                             cell_line: str | None = None, kinds=DISTANCE_KINDS,
                             use_validation_rows: bool = True) -> KindComparison:
    """Distance distributions of the three comparisons under each distance kind.

    Restricted to ``cell_line`` if given, otherwise all cell lines pooled
    (sets concatenated over cell lines with per-line control sampling).
    """
    rows = val_rows(embeddings) if use_validation_rows else np.arange(len(embeddings))
    lines = [cell_line] if cell_line is not None else embeddings.cell_lines
    s1, s2, c = [], [], []
    for line in lines:
        sets = _sets_for_line(embeddings, rows, line, drug1, drug2, control_marker, seed)
        if sets is not None:
            s1.append(sets[0])
            s2.append(sets[1])
            c.append(sets[2])
    if not s1:
        raise DataError(f"no cell line has {drug1}, {drug2} and {control_marker} rows")
    X = embeddings.matrix
    S1, S2, C = (X[np.concatenate(v)] for v in (s1, s2, c))
    distances, medians, inapplicable = {}, {}, []
    for kind in kinds:
        try:
            comps = {
                "S1-S2": pairwise_distances(S1, S2, kind).ravel(),
                "S1-C": pairwise_distances(S1, C, kind).ravel(),
                "S2-C": pairwise_distances(S2, C, kind).ravel(),
            }
        except InapplicableDistance:
            inapplicable.append(kind)
            continue
        distances[kind] = comps
        medians[kind] = {k: float(np.median(v)) for k, v in comps.items()}
    return KindComparison(distances, medians, inapplicable)


SIMILARITY_COLUMNS = ("cell_line", "kind", "D12", "D1C", "D2C", "d", "n_pairs", "flags")
HIST_COLUMNS = ("kind", "comparison", "bin_lo", "bin_hi", "count")


def write_similarity_csv(records, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SIMILARITY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.row())


def read_similarity_csv(path) -> list[SimilarityRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pairs = [int(x) for x in row["n_pairs"].split(";")] if row["n_pairs"] else []
            out.append(SimilarityRecord(
                row["cell_line"], row["kind"], float(row["D12"]), float(row["D1C"]),
                float(row["D2C"]), float(row["d"]), dict(zip(COMPARISONS, pairs)),
                [f for f in row["flags"].split(";") if f],
            ))
    return out


def write_histogram_csv(comparison: KindComparison, path, bins: int = 30) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HIST_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(comparison.histogram_rows(bins))
