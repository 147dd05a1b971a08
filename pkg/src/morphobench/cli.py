"""Command-line entry point: ``morphobench <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PROFILES, ExperimentConfig
from .data import save_dataset
from .embeddings import load_embeddings
from .errors import ConfigError, DataError, NumericalError
from .eval_similarity import DISTANCE_KINDS
from .pipeline import (
    build_report,
    export_embeddings,
    load_prepared,
    prepare_data,
    run_all,
    run_cluster,
    run_probe,
    run_similarity,
    save_prepared,
    train_runs,
)
from .synthetic import generate_synthetic
from .training import TrainingSetup

log = logging.getLogger("morphobench")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 is reserved for data errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", type=Path, help="YAML experiment config overriding the profile")
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="morphobench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="synthesize a dataset (raw, or balanced with its split)")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--raw", action="store_true", help="write the full generated grid, unbalanced")

    p = sub.add_parser("train", help="train one setup or the whole matrix")
    _common(p)
    p.add_argument("--setup", help="MODEL,aug|no_aug,one_crop|multi_crop[,double]")
    p.add_argument("--all", action="store_true", help="run every setup of the matrix")
    p.add_argument("--data", type=Path, help="prepared dataset dir (default: <runs>/data, created if absent)")
    p.add_argument("--runs", type=Path, help="runs directory (default from config)")

    p = sub.add_parser("embed", help="export embeddings from a checkpoint")
    _common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True, help="run directory or its checkpoint.bin")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval-similarity", help="drug-pair distance analysis")
    _common(p)
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--drug1")
    p.add_argument("--drug2")
    p.add_argument("--control")
    p.add_argument("--kind", choices=DISTANCE_KINDS)
    p.add_argument("--out", type=Path, help="output dir (default: <embeddings>/../eval)")

    for name, helptext in (("eval-probe", "drug-vs-control probe"), ("eval-cluster", "UMAP + HDBSCAN partitions")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--embeddings", type=Path, required=True)
        p.add_argument("--out", type=Path, help="output dir (default: <embeddings>/../eval)")

    p = sub.add_parser("report", help="aggregate evaluated runs into the summary table")
    _common(p)
    p.add_argument("--runs", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("run-all", help="data, training, embeddings, evaluation and report in one go")
    _common(p)
    p.add_argument("--runs", type=Path, help="runs directory (default from config)")
    p.add_argument("--no-plots", action="store_true")
    return parser


def _config(args) -> ExperimentConfig:
    return ExperimentConfig.load(getattr(args, "config", None), getattr(args, "profile", "desk"), args.seed)


def _eval_out(args) -> Path:
    return args.out or args.embeddings.parent / "eval"


def cmd_generate_data(args) -> None:
    cfg = _config(args)
    if args.raw:
        save_dataset(generate_synthetic(cfg.synthetic()), args.out)
    else:
        save_prepared(*prepare_data(cfg), args.out)
    print(args.out)


def cmd_train(args) -> None:
    if bool(args.setup) == bool(args.all):
        raise UsageError("give exactly one of --setup or --all")
    cfg = _config(args)
    runs = args.runs or cfg.runs_dir
    data_dir = args.data or runs / "data"
    if (data_dir / "manifest.json").exists():
        dataset, data_split = load_prepared(data_dir)
        if data_split is None:
            raise DataError(f"{data_dir} has no split.json; create it with generate-data")
    else:
        if args.data:
            raise DataError(f"no dataset at {data_dir}")
        dataset, data_split = prepare_data(cfg)
        save_prepared(dataset, data_split, data_dir)
    setups = cfg.setups() if args.all else [TrainingSetup.parse(args.setup, cfg.seed)]
    records = train_runs(cfg, dataset, data_split, runs, setups)
    for r in records:
        print(f"{r.run_id}\t{r.status}\t{r.epochs_completed}/{r.epochs_configured}")
    if any(r.status != "complete" for r in records):
        raise NumericalError("some runs failed; see their record.json")


def cmd_embed(args) -> None:
    run_dir = args.checkpoint.parent if args.checkpoint.is_file() else args.checkpoint
    dataset, data_split = load_prepared(args.data)
    emb = export_embeddings(run_dir, dataset, data_split, args.out)
    print(f"{args.out}\t{len(emb)}x{emb.latent_dim}")


def cmd_eval_similarity(args) -> None:
    overrides = {k: v for k, v in (("drug1", args.drug1), ("drug2", args.drug2),
                                   ("control", args.control), ("kind", args.kind)) if v is not None}
    cfg = ExperimentConfig.load(args.config, args.profile, args.seed, {"similarity": overrides})
    records = run_similarity(load_embeddings(args.embeddings), cfg, _eval_out(args))
    for r in records:
        print(f"{r.cell_line}\td={r.d:.4f}\tD12={r.D12:.4f}")


def cmd_eval_probe(args) -> None:
    cfg = _config(args)
    for m in run_probe(load_embeddings(args.embeddings), cfg, _eval_out(args)):
        print(f"{m.cell_line}\tacc={m.accuracy:.4f}\tauc={m.roc_auc:.4f}")


def cmd_eval_cluster(args) -> None:
    cfg = _config(args)
    for line, best in run_cluster(load_embeddings(args.embeddings), cfg, _eval_out(args)).items():
        print(f"{line}\tn_neighbors={best.n_neighbors}\tmin_cluster_size={best.min_cluster_size}"
              f"\tclusters={best.metrics.n_clusters}")


def cmd_report(args) -> None:
    if not args.runs.is_dir():
        raise DataError(f"no runs directory at {args.runs}")
    cfg = _config(args)
    build_report(args.runs, args.out, cfg, plots=not args.no_plots)
    print(args.out / "summary.md")


def cmd_run_all(args) -> None:
    cfg = _config(args)
    runs = args.runs or cfg.runs_dir
    records, _ = run_all(cfg, runs, plots=not args.no_plots)
    failed = [r.run_id for r in records if r.status != "complete"]
    print(runs / "report" / "summary.md")
    if failed:
        raise NumericalError(f"failed runs: {', '.join(failed)}")


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval-similarity": cmd_eval_similarity,
    "eval-probe": cmd_eval_probe,
    "eval-cluster": cmd_eval_cluster,
    "report": cmd_report,
    "run-all": cmd_run_all,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
