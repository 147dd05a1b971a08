"""Glue between stages: data preparation, training matrix, embedding export, evaluation, report.

Layout under a runs directory::

    data/                  balanced dataset (images.f32, meta.csv, manifest.json) + split.json
    <run_id>/record.json   RunRecord (timing.json alongside)
    <run_id>/checkpoint.bin
    <run_id>/embeddings/   EmbeddingSet of the balanced dataset
    <run_id>/eval/         similarity, probe and clustering outputs
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

from .config import ExperimentConfig
from .data import Dataset, DatasetSplit, balance_subset, load_dataset, save_dataset, split
from .embeddings import EmbeddingSet, save_embeddings
from .eval_cluster import evaluate_clustering, read_cluster_selected, write_cluster_outputs
from .eval_probe import evaluate_probe, read_probe_metrics, write_probe_outputs
from .eval_similarity import (
    distance_kind_comparison,
    drug_similarity_analysis,
    read_similarity_csv,
    write_histogram_csv,
    write_similarity_csv,
)
from .errors import DataError
from .report import SummaryTable, aggregate, mark_top, metric_labels, render
from .synthetic import generate_synthetic
from .training import RunRecord, embed_dataset, load_model, train_matrix

log = logging.getLogger(__name__)


def prepare_data(cfg: ExperimentConfig) -> tuple[Dataset, DatasetSplit]:
    """Load ``data.path`` or synthesize, balance drug vs control, split."""
    path = cfg.raw["data"].get("path")
    full = load_dataset(path) if path else generate_synthetic(cfg.synthetic())
    balanced = balance_subset(full, cfg.seed)
    return balanced, split(balanced, cfg.val_fraction, cfg.seed)


def save_prepared(dataset: Dataset, data_split: DatasetSplit, out_dir) -> Path:
    out = save_dataset(dataset, out_dir)
    (out / "split.json").write_text(json.dumps(data_split.to_json(), sort_keys=True) + "\n")
    return out


def load_prepared(data_dir) -> tuple[Dataset, DatasetSplit | None]:
    root = Path(data_dir)
    ds = load_dataset(root)
    sp = root / "split.json"
    return ds, (DatasetSplit.from_json(json.loads(sp.read_text())) if sp.exists() else None)


def train_runs(cfg: ExperimentConfig, dataset: Dataset, data_split: DatasetSplit, runs_dir,
               setups=None) -> list[RunRecord]:
    return train_matrix(dataset, data_split, setups if setups is not None else cfg.setups(), runs_dir,
                        optimizer_config=cfg.optimizer(), early_stop_config=cfg.early_stop(),
                        backbone_config=cfg.backbone(), byol_config=cfg.byol(), policy=cfg.policy())


def export_embeddings(run_dir, dataset: Dataset, data_split: DatasetSplit | None,
                      out_dir=None) -> EmbeddingSet:
    """Embed ``dataset`` with the run's checkpoint; written to ``run_dir/embeddings`` by default."""
    run_dir = Path(run_dir)
    model, meta = load_model(run_dir)
    rec = RunRecord.load(run_dir)
    emb = embed_dataset(model, dataset, split=data_split, model_id=meta["setup"]["model"],
                        setup_id=meta["setup_id"], checkpoint_checksum=rec.checkpoint_checksum or "")
    save_embeddings(emb, out_dir or run_dir / "embeddings")
    return emb


def evaluate_embeddings(emb: EmbeddingSet, cfg: ExperimentConfig, out_dir) -> None:
    """All three downstream tasks on one embedding set."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_similarity(emb, cfg, out)
    run_probe(emb, cfg, out)
    run_cluster(emb, cfg, out)


def run_similarity(emb: EmbeddingSet, cfg: ExperimentConfig, out: Path, kind: str | None = None):
    s = cfg.raw["similarity"]
    records = drug_similarity_analysis(emb, s["drug1"], s["drug2"], s["control"],
                                       kind or s["kind"], cfg.seed)
    write_similarity_csv(records, out / "similarity.csv")
    try:
        comparison = distance_kind_comparison(emb, s["drug1"], s["drug2"], s["control"], cfg.seed)
        write_histogram_csv(comparison, out / "similarity_hist.csv")
    except DataError as exc:
        log.warning("no distance histograms: %s", exc)
    return records


def run_probe(emb: EmbeddingSet, cfg: ExperimentConfig, out: Path):
    if emb.split is None:
        raise DataError("probe evaluation needs embeddings with an attached split")
    metrics, grid_rows, _ = evaluate_probe(emb, cfg.probe(), cfg.seed)
    write_probe_outputs(metrics, grid_rows, out, model=emb.model_id, setup=emb.setup_id)
    return metrics


def run_cluster(emb: EmbeddingSet, cfg: ExperimentConfig, out: Path):
    c = cfg.raw["cluster"]
    results, selected, points = evaluate_clustering(emb, c["n_neighbors"], c["min_cluster_size"],
                                                    cfg.seed, float(c["min_dist"]))
    write_cluster_outputs(results, selected, points, out)
    return selected


def iter_runs(runs_dir):
    """(run_dir, RunRecord) for every run directory, sorted by name."""
    for rec_path in sorted(Path(runs_dir).glob("*/record.json")):
        yield rec_path.parent, RunRecord.load(rec_path.parent)


def collect_results(runs_dir) -> tuple[dict, dict, dict, dict]:
    """Per (model, column): similarity records, probe rows, selected partitions; plus histogram rows.

    Double-augmented ICL variants and failed runs are left out of the table.
    """
    sim, probe, clusters, hist = {}, {}, {}, {}
    for run_dir, rec in iter_runs(runs_dir):
        setup = rec.setup
        if setup.icl_double_augment or rec.status != "complete":
            continue
        key = (setup.model, setup.column)
        ev = run_dir / "eval"
        if (ev / "similarity.csv").exists():
            sim[key] = read_similarity_csv(ev / "similarity.csv")
        if (ev / "probe_metrics.csv").exists():
            probe[key] = read_probe_metrics(ev / "probe_metrics.csv")
        if (ev / "cluster_selected.csv").exists():
            clusters[key] = read_cluster_selected(ev / "cluster_selected.csv")
        if (ev / "similarity_hist.csv").exists():
            with open(ev / "similarity_hist.csv", newline="") as fh:
                hist[setup.setup_id] = list(csv.DictReader(fh))
    return sim, probe, clusters, hist


def build_report(runs_dir, out_dir, cfg: ExperimentConfig | None = None, plots: bool = True) -> SummaryTable:
    sim, probe, clusters, hist = collect_results(runs_dir)
    labels = metric_labels(cfg.raw["similarity"]["drug1"], cfg.raw["similarity"]["drug2"]) if cfg else None
    table = mark_top(aggregate(sim, probe, clusters, labels=labels))
    render(table, out_dir, histograms=hist, plots=plots)
    return table


def run_all(cfg: ExperimentConfig, runs_dir, report_dir=None, plots: bool = True):
    """Every stage end to end; returns (records, SummaryTable)."""
    runs_dir = Path(runs_dir)
    dataset, data_split = prepare_data(cfg)
    save_prepared(dataset, data_split, runs_dir / "data")
    records = train_runs(cfg, dataset, data_split, runs_dir)
    for rec in records:
        if rec.status != "complete":
            continue
        run_dir = runs_dir / rec.run_id
        if (run_dir / "eval" / "cluster_selected.csv").exists() and rec.from_cache:
            continue
        emb = export_embeddings(run_dir, dataset, data_split)
        evaluate_embeddings(emb, cfg, run_dir / "eval")
        log.info("evaluated %s", rec.run_id)
    table = build_report(runs_dir, Path(report_dir or runs_dir / "report"), cfg, plots)
    return records, table
