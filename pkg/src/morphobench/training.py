"""Training of the 16-setup matrix, early stopping, BYOL search and embedding export."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np
import torch

from .augment import (
    MULTI_CROP,
    ONE_CROP,
    AugmentationPolicy,
    CropStrategy,
    apply_augmentations,
    byol_view_pair,
    make_views,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, DatasetSplit
from .embeddings import EmbeddingSet
from .errors import ConfigError, NumericalError
from .models import (
    MODEL_KINDS,
    BackboneConfig,
    ByolConfig,
    ICLModel,
    bce_reconstruction_loss,
    build_model,
    ce_loss,
)

log = logging.getLogger(__name__)

SETUP_COLUMNS = ("aug/multi_crop", "aug/one_crop", "no_aug/multi_crop", "no_aug/one_crop")


@dataclass(frozen=True)
class TrainingSetup:
    model: str
    augment: bool
    crop: str
    icl_double_augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}")
        CropStrategy(self.crop)
        if self.icl_double_augment and self.model != "ICL":
            raise ConfigError("icl_double_augment applies only to ICL")

    @property
    def column(self) -> str:
        return f"{'aug' if self.augment else 'no_aug'}/{self.crop}"

    @property
    def setup_id(self) -> str:
        sid = f"{self.model}-{self.column.replace('/', '-')}"
        return sid + "-double" if self.icl_double_augment else sid

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "TrainingSetup":
        """Parse ``MODEL,AUG,CROP`` such as ``ICL,aug,multi_crop`` (optionally ``,double``)."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) not in (3, 4) or parts[1] not in ("aug", "no_aug"):
            raise ConfigError(f"setup must look like MODEL,aug|no_aug,one_crop|multi_crop: {text!r}")
        double = len(parts) == 4 and parts[3] == "double"
        if len(parts) == 4 and not double:
            raise ConfigError(f"unknown setup suffix {parts[3]!r}")
        return cls(parts[0].upper(), parts[1] == "aug", parts[2], double, seed)


def enumerate_setups(models=MODEL_KINDS, augment=(True, False), crops=(MULTI_CROP, ONE_CROP),
                     seed: int = 0, icl_double_augment: bool = False) -> list[TrainingSetup]:
    """model x augment x crop; with ``icl_double_augment`` ICL also gets double-augmented variants."""
    setups = [TrainingSetup(m, a, c, False, seed) for m, a, c in product(models, augment, crops)]
    if icl_double_augment and "ICL" in models:
        setups += [TrainingSetup("ICL", a, c, True, seed) for a, c in product(augment, crops)]
    return setups


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 256

    def __post_init__(self):
        if self.algorithm.lower() != "adam":
            raise ConfigError("only Adam is supported for representation training")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError("invalid optimizer settings")


@dataclass
class EarlyStopConfig:
    relative_margin: float = 0.05
    patience: int = 3

    def __post_init__(self):
        if self.relative_margin <= 0 or self.patience < 1:
            raise ConfigError("early stop needs relative_margin > 0 and patience >= 1")


@dataclass
class RunRecord:
    setup: TrainingSetup
    run_id: str = ""
    status: str = "complete"
    epochs_configured: int = 0
    epochs_completed: int = 0
    stopped_early: bool = False
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    train_reconstruction: list = field(default_factory=list)
    val_reconstruction: list = field(default_factory=list)
    initial_val_loss: float | None = None
    checkpoint: str | None = None
    checkpoint_checksum: str | None = None
    error: str | None = None
    epoch_seconds: list = field(default_factory=list)
    total_seconds: float = 0.0
    from_cache: bool = False

    _TIMING = ("epoch_seconds", "total_seconds")

    def to_json(self) -> dict:
        """Deterministic part of the record (wall-clock lives in timing.json)."""
        d = asdict(self)
        d["setup"] = asdict(self.setup)
        d["setup_id"] = self.setup.setup_id
        for k in self._TIMING + ("from_cache",):
            d.pop(k)
        return d

    def timing_json(self) -> dict:
        return {"epoch_seconds": self.epoch_seconds, "total_seconds": self.total_seconds}

    @classmethod
    def from_json(cls, d: dict, timing: dict | None = None) -> "RunRecord":
        d = dict(d)
        d.pop("setup_id", None)
        d["setup"] = TrainingSetup(**d["setup"])
        d.update(timing or {})
        return cls(**d)

    def save(self, run_dir: str | Path) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "record.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        (run_dir / "timing.json").write_text(json.dumps(self.timing_json(), indent=2) + "\n")

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunRecord":
        run_dir = Path(run_dir)
        timing_path = run_dir / "timing.json"
        timing = json.loads(timing_path.read_text()) if timing_path.exists() else None
        return cls.from_json(json.loads((run_dir / "record.json").read_text()), timing)


def early_stop_check(val_loss_history, config: EarlyStopConfig) -> bool:
    """True once the loss has exceeded (1 + margin) x its running minimum for ``patience`` consecutive epochs."""
    run = 0
    best = math.inf
    for loss in val_loss_history:
        if loss > (1.0 + config.relative_margin) * best:
            run += 1
        else:
            run = 0
        best = min(best, loss)
    return run >= config.patience


# ---------------------------------------------------------------------------
# batches


def _view_batch(images, labels, setup: TrainingSetup, policy, rng):
    """Flattened views for WSL/SSL/SSR: every view is an independent sample with its source label."""
    strategy = CropStrategy(setup.crop)
    pol = policy if setup.augment else None
    xs, ys = [], []
    for img, y in zip(images, labels):
        views = make_views(img, strategy, pol, rng).views
        xs.extend(views)
        ys.extend([y] * len(views))
    return np.stack(xs), np.asarray(ys)


def _pair_batch(images, setup: TrainingSetup, policy, rng, crop=None):
    """(views, partners) for ICL; every view is paired with an independently augmented copy of its source."""
    pol = policy if setup.augment else AugmentationPolicy.identity()
    crop = crop or setup.crop
    v1, v2 = [], []
    for img in images:
        if crop == ONE_CROP:
            a, b = byol_view_pair(img, pol, setup.icl_double_augment, rng)
            v1.append(a)
            v2.append(b)
        else:
            src = apply_augmentations(img, pol, rng) if setup.icl_double_augment else img
            views = make_views(src, CropStrategy(MULTI_CROP), pol, rng).views
            v1.extend(views)
            v2.extend(apply_augmentations(src, pol, rng) for _ in views)
    return np.stack(v1), np.stack(v2)


def _t(x):
    return torch.from_numpy(np.array(x, dtype=np.float32)).unsqueeze(1)


@contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


# ---------------------------------------------------------------------------
# evaluation of a model on the validation set


@torch.no_grad()
def _evaluate(model, setup, images, labels, policy, seed, batch_size):
    """Validation metrics on un-augmented single crops (ICL: fixed-seed pairs)."""
    was_training = model.training
    model.eval()
    out = {"loss": 0.0, "accuracy": None, "reconstruction": None}
    n = len(images)
    if n == 0:
        model.train(was_training)
        return out
    tot_ce = tot_bce = tot_byol = correct = 0.0
    rng = np.random.default_rng([seed, 7])
    for start in range(0, n, batch_size):
        xb = images[start:start + batch_size]
        yb = torch.as_tensor(labels[start:start + batch_size])
        w = len(xb)
        if setup.model == "ICL":
            v1, v2 = _pair_batch(xb, setup, policy, rng, crop=ONE_CROP)
            tot_byol += model.pair_loss(_t(v1), _t(v2)).item() * w
            continue
        x = _t(xb)
        z = model.backbone(x)
        if setup.model in ("WSL", "SSR"):
            logits = model.classifier(z)
            tot_ce += ce_loss(logits, yb).item() * w
            correct += (logits.argmax(1) == yb).sum().item()
        if setup.model in ("SSL", "SSR"):
            tot_bce += bce_reconstruction_loss(model.decoder(z), x.squeeze(1)).item() * w
    model.train(was_training)
    if setup.model == "ICL":
        out["loss"] = tot_byol / n
    else:
        if setup.model in ("WSL", "SSR"):
            out["accuracy"] = correct / n
        if setup.model in ("SSL", "SSR"):
            out["reconstruction"] = tot_bce / n
        out["loss"] = (tot_ce + tot_bce) / n
    return out


# ---------------------------------------------------------------------------
# training


def _finite(loss: torch.Tensor):
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()}")


def train(setup: TrainingSetup, dataset: Dataset, split: DatasetSplit,
          optimizer_config: OptimizerConfig, early_stop_config: EarlyStopConfig, *,
          backbone_config: BackboneConfig | None = None, byol_config: ByolConfig | None = None,
          policy: AugmentationPolicy | None = None, run_dir: str | Path | None = None,
          run_id: str = "", single_threaded: bool = True):
    """Train one setup; returns (model, RunRecord).

    WSL minimizes cross-entropy, SSL pixelwise BCE, SSR alternates a
    classifier step and a reconstruction step on every batch (separate Adam
    states, shared encoder), ICL minimizes the BYOL loss with an EMA target
    update after each optimizer step.
    """
    backbone_config = backbone_config or BackboneConfig()
    policy = policy or AugmentationPolicy()
    torch.manual_seed(setup.seed)
    model = build_model(setup.model, backbone_config, byol_config)
    record = RunRecord(setup=setup, run_id=run_id, epochs_configured=optimizer_config.epochs)

    train_ds = dataset.select_ids(split.train_ids)
    val_ds = dataset.select_ids(split.val_ids)
    train_x, train_y = np.asarray(train_ds.images), train_ds.labels
    val_x, val_y = np.asarray(val_ds.images), val_ds.labels
    lr = optimizer_config.learning_rate
    bs = optimizer_config.batch_size

    if setup.model == "SSR":
        optimizers = {
            "cls": torch.optim.Adam(list(model.backbone.parameters()) + list(model.classifier.parameters()), lr=lr),
            "rec": torch.optim.Adam(list(model.backbone.parameters()) + list(model.decoder.parameters()), lr=lr),
        }
    elif setup.model == "ICL":
        optimizers = {"main": torch.optim.Adam(model.online_parameters(), lr=lr)}
    else:
        optimizers = {"main": torch.optim.Adam(model.parameters(), lr=lr)}

    rng = np.random.default_rng([setup.seed, 1])
    with _single_thread(single_threaded):
        record.initial_val_loss = _evaluate(model, setup, val_x, val_y, policy, setup.seed, bs)["loss"]
        t_prev = t_start = time.perf_counter()
        try:
            for epoch in range(optimizer_config.epochs):
                model.train()
                order = rng.permutation(len(train_x))
                sums = {"loss": 0.0, "correct": 0.0, "rec": 0.0, "n": 0}
                for start in range(0, len(order), bs):
                    idx = order[start:start + bs]
                    _train_step(model, setup, optimizers, train_x[idx], train_y[idx], policy, rng, sums)
                ev = _evaluate(model, setup, val_x, val_y, policy, setup.seed, bs)
                n = max(sums["n"], 1)
                record.train_loss.append(sums["loss"] / n)
                record.val_loss.append(ev["loss"])
                if setup.model in ("WSL", "SSR"):
                    record.train_accuracy.append(sums["correct"] / n)
                    record.val_accuracy.append(ev["accuracy"])
                if setup.model in ("SSL", "SSR"):
                    record.train_reconstruction.append(sums["rec"] / n)
                    record.val_reconstruction.append(ev["reconstruction"])
                record.epochs_completed = epoch + 1
                if not all(map(math.isfinite, (record.train_loss[-1], record.val_loss[-1]))):
                    raise NumericalError(f"non-finite loss at epoch {epoch + 1}")
                stop = early_stop_check(record.val_loss, early_stop_config)
                t_now = time.perf_counter()
                record.epoch_seconds.append(t_now - t_prev)
                t_prev = t_now
                log.info("%s epoch %d train %.4f val %.4f", setup.setup_id, epoch + 1,
                         record.train_loss[-1], record.val_loss[-1])
                if stop:
                    record.stopped_early = record.epochs_completed < optimizer_config.epochs
                    break
        except NumericalError as exc:
            record.status = "failed"
            record.error = str(exc)
            log.warning("%s failed: %s", setup.setup_id, exc)
        record.total_seconds = t_prev - t_start

    if run_dir is not None:
        meta = {
            "setup": asdict(setup),
            "setup_id": setup.setup_id,
            "backbone": backbone_config.to_json(),
            "byol": asdict(byol_config) if (setup.model == "ICL" and byol_config) else None,
            "epoch": record.epochs_completed,
            "seed": setup.seed,
            "run_id": run_id,
        }
        record.checkpoint = "checkpoint.bin"
        record.checkpoint_checksum = save_checkpoint(Path(run_dir) / "checkpoint.bin", model, meta)
        record.save(run_dir)
    return model, record


def _train_step(model, setup, optimizers, xb, yb, policy, rng, sums):
    if setup.model == "ICL":
        if len(xb) < 2 and setup.crop == ONE_CROP:
            return  # batch-norm in the projector needs at least two rows
        v1, v2 = _pair_batch(xb, setup, policy, rng)
        opt = optimizers["main"]
        loss = model.pair_loss(_t(v1), _t(v2))
        _finite(loss)
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.update_target()
        sums["loss"] += loss.item() * len(v1)
        sums["n"] += len(v1)
        return

    xv, yv = _view_batch(xb, yb, setup, policy, rng)
    x, y = _t(xv), torch.as_tensor(yv)
    n = len(xv)
    if setup.model == "WSL":
        logits = model(x)
        loss = ce_loss(logits, y)
        _finite(loss)
        optimizers["main"].zero_grad()
        loss.backward()
        optimizers["main"].step()
        sums["correct"] += (logits.argmax(1) == y).sum().item()
        sums["loss"] += loss.item() * n
    elif setup.model == "SSL":
        loss = bce_reconstruction_loss(model(x), x.squeeze(1))
        _finite(loss)
        optimizers["main"].zero_grad()
        loss.backward()
        optimizers["main"].step()
        sums["rec"] += loss.item() * n
        sums["loss"] += loss.item() * n
    else:
        logits = model.classifier(model.backbone(x))
        ce = ce_loss(logits, y)
        _finite(ce)
        optimizers["cls"].zero_grad()
        ce.backward()
        optimizers["cls"].step()
        bce = bce_reconstruction_loss(model.decoder(model.backbone(x)), x.squeeze(1))
        _finite(bce)
        optimizers["rec"].zero_grad()
        bce.backward()
        optimizers["rec"].step()
        sums["correct"] += (logits.argmax(1) == y).sum().item()
        sums["rec"] += bce.item() * n
        sums["loss"] += (ce.item() + bce.item()) * n
    sums["n"] += n


# ---------------------------------------------------------------------------
# matrix


def run_id_for(setup: TrainingSetup, config_blob: dict, dataset_checksum: str) -> str:
    payload = json.dumps({"setup": asdict(setup), "config": config_blob, "data": dataset_checksum},
                         sort_keys=True, default=str)
    return f"{setup.setup_id}-{hashlib.sha256(payload.encode()).hexdigest()[:10]}"


def load_model(run_dir: str | Path, checkpoint_name: str = "checkpoint.bin"):
    """Rebuild a trained model from its checkpoint; returns (model, checkpoint meta)."""
    state, meta = load_checkpoint(Path(run_dir) / checkpoint_name)
    byol = ByolConfig(**meta["byol"]) if meta.get("byol") else None
    model = build_model(meta["setup"]["model"], BackboneConfig(**meta["backbone"]), byol)
    model.load_state_dict(state)
    return model, meta


def train_matrix(dataset: Dataset, split: DatasetSplit, setups, runs_dir: str | Path, *,
                 optimizer_config: OptimizerConfig, early_stop_config: EarlyStopConfig,
                 backbone_config: BackboneConfig | None = None, byol_config: ByolConfig | None = None,
                 policy: AugmentationPolicy | None = None) -> list[RunRecord]:
    """Train every setup under ``runs_dir/<run_id>``; completed runs are loaded, not retrained."""
    backbone_config = backbone_config or BackboneConfig()
    policy = policy or AugmentationPolicy()
    blob = {
        "optimizer": asdict(optimizer_config),
        "early_stop": asdict(early_stop_config),
        "backbone": backbone_config.to_json(),
        "byol": asdict(byol_config) if byol_config else None,
        "policy": asdict(policy),
        "split": {"val_fraction": split.val_fraction, "seed": split.seed},
    }
    checksum = dataset.checksum()
    records = []
    for setup in setups:
        rid = run_id_for(setup, blob, checksum)
        run_dir = Path(runs_dir) / rid
        if (run_dir / "record.json").exists():
            rec = RunRecord.load(run_dir)
            if rec.status == "complete":
                rec.from_cache = True
                records.append(rec)
                log.info("skip %s (completed)", rid)
                continue
        try:
            _, rec = train(setup, dataset, split, optimizer_config, early_stop_config,
                           backbone_config=backbone_config,
                           byol_config=byol_config if setup.model == "ICL" else None,
                           policy=policy, run_dir=run_dir, run_id=rid)
        except Exception as exc:  # one broken setup must not sink the matrix
            log.exception("%s crashed", rid)
            rec = RunRecord(setup=setup, run_id=rid, status="failed", error=repr(exc),
                            epochs_configured=optimizer_config.epochs)
            rec.save(run_dir)
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# BYOL hyperparameter search


@dataclass
class ByolSearchRanges:
    projection_size: tuple = (32, 512)
    projection_hidden_size: tuple = (32, 4096)
    moving_average_decay: tuple = (0.9, 0.999)
    equal_hidden: bool = False

    def validate(self):
        for name in ("projection_size", "projection_hidden_size", "moving_average_decay"):
            rng = getattr(self, name)
            if rng is None or len(rng) != 2 or rng[0] > rng[1]:
                raise ConfigError(f"empty search range for {name}: {rng}")
        if self.projection_size[0] < 1:
            raise ConfigError("projection_size range must be positive")

    def sample(self, rng: np.random.Generator) -> ByolConfig:
        def log_int(lo, hi):
            return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))

        p = log_int(*self.projection_size)
        h = p if self.equal_hidden else log_int(*self.projection_hidden_size)
        tau = float(rng.uniform(*self.moving_average_decay))
        return ByolConfig(projection_size=p, projection_hidden_size=h, moving_average_decay=tau)


def byol_hyperparameter_search(dataset: Dataset, split: DatasetSplit, n_trials: int = 100,
                               ranges: ByolSearchRanges | None = None, *, trial_epochs: int = 1,
                               batch_size: int = 64, learning_rate: float = 1e-4,
                               backbone_config: BackboneConfig | None = None,
                               policy: AugmentationPolicy | None = None, seed: int = 0,
                               log_path: str | Path | None = None):
    """Random search over BYOL projector sizes and EMA decay.

    Every trial trains ICL (augmented, one crop) with the same training seed
    for ``trial_epochs`` and is scored by its final validation BYOL loss.
    Returns (best ByolConfig, trial rows); the first trial wins ties.
    """
    ranges = ranges or ByolSearchRanges()
    ranges.validate()
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    setup = TrainingSetup("ICL", True, ONE_CROP, False, seed)
    opt = OptimizerConfig(learning_rate=learning_rate, epochs=trial_epochs, batch_size=batch_size)
    trials = []
    for i in range(n_trials):
        cfg = ranges.sample(rng)
        _, rec = train(setup, dataset, split, opt, EarlyStopConfig(patience=10 ** 9),
                       backbone_config=backbone_config, byol_config=cfg, policy=policy)
        loss = rec.val_loss[-1] if rec.val_loss else rec.initial_val_loss
        if rec.status != "complete":
            loss = math.inf
        trials.append({"trial": i, **asdict(cfg), "val_loss": loss})
    best = min(range(len(trials)), key=lambda i: (trials[i]["val_loss"], i))
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(trials[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(trials)
    row = trials[best]
    return ByolConfig(row["projection_size"], row["projection_hidden_size"],
                      row["moving_average_decay"]), trials


# ---------------------------------------------------------------------------
# embeddings


@torch.no_grad()
def embed_dataset(model: torch.nn.Module, dataset: Dataset, *, split: DatasetSplit | None = None,
                  model_id: str = "", setup_id: str = "", checkpoint_checksum: str = "",
                  batch_size: int = 256) -> EmbeddingSet:
    """Backbone latents for every sample in dataset order, no augmentation, single crop."""
    backbone = model.backbone if hasattr(model, "backbone") else model
    was_training = backbone.training
    backbone.eval()
    images = np.asarray(dataset.images)
    chunks = [backbone(_t(images[s:s + batch_size])).numpy()
              for s in range(0, len(images), batch_size)]
    backbone.train(was_training)
    dim = backbone.fc.out_features
    matrix = np.concatenate(chunks) if chunks else np.zeros((0, dim), np.float32)
    return EmbeddingSet(matrix, dataset.meta, model_id, setup_id, checkpoint_checksum, split)
