"""Per-cell-line UMAP + HDBSCAN partitions, their quality metrics, grid search and selection."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.cluster import HDBSCAN
from sklearn.metrics import davies_bouldin_score, silhouette_score

from .embeddings import EmbeddingSet
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReductionConfig:
    n_neighbors: int = 15
    n_components: int = 2
    min_dist: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ConfigError("n_neighbors must be >= 2")


@dataclass(frozen=True)
class ClusterConfig:
    min_cluster_size: int = 5

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ConfigError("min_cluster_size must be >= 2")


@dataclass
class PartitionMetrics:
    n_clusters: int
    noise_pct: float
    silhouette: float | None = None
    davies_bouldin: float | None = None

    @property
    def complete(self) -> bool:
        return self.silhouette is not None and self.davies_bouldin is not None


@dataclass
class GridResult:
    cell_line: str
    n_neighbors: int
    min_cluster_size: int
    metrics: PartitionMetrics | None
    flags: list = field(default_factory=list)

    def row(self) -> dict:
        m = self.metrics

        def fmt(v):
            return "NA" if v is None else repr(float(v))

        return {
            "cell_line": self.cell_line, "n_neighbors": self.n_neighbors,
            "min_cluster_size": self.min_cluster_size,
            "n_clusters": "NA" if m is None else m.n_clusters,
            "noise_pct": "NA" if m is None else repr(float(m.noise_pct)),
            "silhouette": fmt(m.silhouette if m else None),
            "davies_bouldin": fmt(m.davies_bouldin if m else None),
            "flags": ";".join(self.flags),
        }


def reduce(rows, config: ReductionConfig) -> np.ndarray:
    """UMAP embedding (N x n_components), deterministic for a fixed seed."""
    import umap  # heavy import (numba); kept local

    x = np.asarray(rows, dtype=np.float32)
    if len(x) <= config.n_neighbors:
        raise DataError(f"UMAP needs more than n_neighbors={config.n_neighbors} rows, got {len(x)}")
    reducer = umap.UMAP(n_neighbors=config.n_neighbors, n_components=config.n_components,
                        min_dist=config.min_dist, random_state=config.seed, n_jobs=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = reducer.fit_transform(x)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise DataError("UMAP produced non-finite coordinates")
    return out


def cluster(points, config: ClusterConfig) -> np.ndarray:
    """HDBSCAN labels, -1 for noise."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return -np.ones(len(pts), dtype=np.int64)
    mcs = min(config.min_cluster_size, len(pts))
    return HDBSCAN(min_cluster_size=mcs, copy=True).fit_predict(pts).astype(np.int64)


def partition_metrics(points, labels) -> PartitionMetrics:
    """Cluster count, noise share and, with >= 2 clusters, silhouette / Davies-Bouldin on non-noise points."""
    pts = np.asarray(points, dtype=np.float64)
    lab = np.asarray(labels)
    mask = lab != -1
    n_noise = int(np.sum(~mask))
    clusters = np.unique(lab[mask])
    out = PartitionMetrics(n_clusters=len(clusters), noise_pct=100.0 * n_noise / len(lab))
    if len(clusters) >= 2 and mask.sum() > len(clusters):
        out.silhouette = float(silhouette_score(pts[mask], lab[mask]))
        out.davies_bouldin = float(davies_bouldin_score(pts[mask], lab[mask]))
    return out


def grid_search_partitions(embeddings_per_line: dict, n_neighbors_grid, min_cluster_size_grid,
                           seed: int = 0, min_dist: float = 0.1, keep_points: bool = False):
    """Full n_neighbors x min_cluster_size grid per cell line; one UMAP fit per n_neighbors.

    With ``keep_points`` also returns {(cell_line, n_neighbors, min_cluster_size): (points, labels)}.
    """
    if not n_neighbors_grid or not min_cluster_size_grid:
        raise ConfigError("empty clustering grid")
    results, partitions = [], {}
    for line, rows in embeddings_per_line.items():
        rows = np.asarray(rows)
        for nn in n_neighbors_grid:
            try:
                pts = reduce(rows, ReductionConfig(n_neighbors=nn, min_dist=min_dist, seed=seed))
            except DataError:
                for mcs in min_cluster_size_grid:
                    results.append(GridResult(line, nn, mcs, None, ["skipped:too_few_rows"]))
                continue
            for mcs in min_cluster_size_grid:
                if mcs >= len(rows):
                    results.append(GridResult(line, nn, mcs, None, ["skipped:min_cluster_size"]))
                    continue
                labels = cluster(pts, ClusterConfig(mcs))
                m = partition_metrics(pts, labels)
                flags = [] if m.complete else ["metrics_missing"]
                results.append(GridResult(line, nn, mcs, m, flags))
                if keep_points:
                    partitions[(line, nn, mcs)] = (pts, labels)
    return (results, partitions) if keep_points else results


def select_best_partition(grid_results) -> GridResult:
    """Pick one partition per cell line.

    1. silhouette above the median, 2. Davies-Bouldin below the median
    (both medians over all eligible rows), 3. lowest noise share,
    4. most clusters; remaining ties go to smaller n_neighbors, then smaller
    min_cluster_size. A strict filter that empties the survivors is relaxed
    to an inclusive one, and skipped if that is empty too.
    """
    eligible = [r for r in grid_results if r.metrics is not None and r.metrics.complete]
    if not eligible:
        raise DataError("no valid partition")
    sil_med = float(np.median([r.metrics.silhouette for r in eligible]))
    db_med = float(np.median([r.metrics.davies_bouldin for r in eligible]))

    def keep(rows, strict, inclusive):
        out = [r for r in rows if strict(r)]
        if not out:
            out = [r for r in rows if inclusive(r)]
        return out or rows

    rows = keep(eligible, lambda r: r.metrics.silhouette > sil_med,
                lambda r: r.metrics.silhouette >= sil_med)
    rows = keep(rows, lambda r: r.metrics.davies_bouldin < db_med,
                lambda r: r.metrics.davies_bouldin <= db_med)
    min_noise = min(r.metrics.noise_pct for r in rows)
    rows = [r for r in rows if r.metrics.noise_pct == min_noise]
    return min(rows, key=lambda r: (-r.metrics.n_clusters, r.n_neighbors, r.min_cluster_size))


def evaluate_clustering(embeddings: EmbeddingSet, n_neighbors_grid, min_cluster_size_grid,
                        seed: int = 0, min_dist: float = 0.1):
    """Grid search and selection for every cell line.

    Returns (grid results, {cell_line: selected GridResult}, {cell_line: (points, labels)}).
    """
    per_line = {}
    for line in embeddings.cell_lines:
        idx = [i for i, m in enumerate(embeddings.meta) if m.cell_line == line]
        per_line[line] = embeddings.matrix[idx]
    results, parts = grid_search_partitions(per_line, n_neighbors_grid, min_cluster_size_grid,
                                            seed, min_dist, keep_points=True)
    selected, chosen_points = {}, {}
    for line in per_line:
        try:
            best = select_best_partition([r for r in results if r.cell_line == line])
        except DataError:
            log.warning("no valid partition for cell line %s", line)
            continue
        selected[line] = best
        chosen_points[line] = parts[(line, best.n_neighbors, best.min_cluster_size)]
    return results, selected, chosen_points


GRID_COLUMNS = ("cell_line", "n_neighbors", "min_cluster_size", "n_clusters", "noise_pct",
                "silhouette", "davies_bouldin", "flags")


def write_cluster_outputs(results, selected: dict, points: dict, out_dir) -> None:
    out = Path(out_dir)
    (out / "partitions").mkdir(parents=True, exist_ok=True)
    for name, rows in (("cluster_grid.csv", results), ("cluster_selected.csv", list(selected.values()))):
        with open(out / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow(r.row())
    for line, (pts, labels) in points.items():
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in line)
        with open(out / "partitions" / f"{safe}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "label"])
            for (x, y, *_), lab in zip(pts, labels):
                w.writerow([repr(float(x)), repr(float(y)), int(lab)])


def read_cluster_selected(path) -> list[dict]:
    def num(v, cast=float):
        return None if v in ("NA", "") else cast(v)

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{
        "cell_line": r["cell_line"],
        "n_neighbors": int(r["n_neighbors"]),
        "min_cluster_size": int(r["min_cluster_size"]),
        "n_clusters": num(r["n_clusters"], int),
        "noise_pct": num(r["noise_pct"]),
        "silhouette": num(r["silhouette"]),
        "davies_bouldin": num(r["davies_bouldin"]),
    } for r in rows]

