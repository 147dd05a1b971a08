"""Image-crop datasets: validation, ingestion, balancing, splitting and on-disk format.

A dataset directory holds three files::

    images.f32     little-endian float32, row-major N x 64 x 64
    meta.csv       sample_id,cell_line,drug,concentration_level,time_point,label,replicate
    manifest.json  {"n": N, "checksum": sha256 hex, "generator": {...} | null}
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

CROP_SIZE = 64
CONTROL_MARKER = "DMSO"
LABELS = ("control", "drug")
META_COLUMNS = (
    "sample_id",
    "cell_line",
    "drug",
    "concentration_level",
    "time_point",
    "label",
    "replicate",
)
MAX_CONCENTRATION_LEVEL = 4


def check_crop(pixels: np.ndarray, *, name: str = "crop") -> np.ndarray:
    """Raise DataError unless ``pixels`` is a finite 64x64 array in [0, 1]."""
    arr = np.asarray(pixels)
    if arr.shape != (CROP_SIZE, CROP_SIZE):
        raise DataError(f"{name}: expected shape (64, 64), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(f"{name}: intensities must lie in [0, 1]")
    return arr


def check_crops(batch: np.ndarray) -> np.ndarray:
    arr = np.asarray(batch)
    if arr.ndim != 3 or arr.shape[1:] != (CROP_SIZE, CROP_SIZE):
        raise DataError(f"expected N x 64 x 64 crops, got {arr.shape}")
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise DataError("crop intensities must lie in [0, 1]")
    return arr


@dataclass(frozen=True)
class SampleMeta:
    sample_id: str
    cell_line: str
    drug: str
    concentration_level: int
    time_point: float
    label: str
    replicate: str = "r0"

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"{self.sample_id}: unknown label {self.label!r}")
        if not 0 <= int(self.concentration_level) <= MAX_CONCENTRATION_LEVEL:
            raise DataError(f"{self.sample_id}: concentration_level must be in 0..4")
        if self.time_point < 0:
            raise DataError(f"{self.sample_id}: negative time_point")

    @property
    def is_drug(self) -> bool:
        return self.label == "drug"

    def to_row(self) -> dict:
        row = asdict(self)
        row["time_point"] = repr(float(self.time_point))
        return row

    @classmethod
    def from_row(cls, row: dict, control_marker: str = CONTROL_MARKER) -> "SampleMeta":
        missing = [c for c in META_COLUMNS if row.get(c) in (None, "")]
        if missing:
            raise DataError(f"metadata row {row.get('sample_id', '?')}: missing {missing}")
        try:
            meta = cls(
                sample_id=row["sample_id"],
                cell_line=row["cell_line"],
                drug=row["drug"],
                concentration_level=int(row["concentration_level"]),
                time_point=float(row["time_point"]),
                label=row["label"],
                replicate=row["replicate"],
            )
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"metadata row {row['sample_id']}: {exc}") from exc
        if (meta.drug == control_marker) != (meta.label == "control"):
            raise DataError(
                f"{meta.sample_id}: label {meta.label!r} inconsistent with drug {meta.drug!r}"
            )
        return meta


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable ordered collection of crops with row-aligned metadata."""

    images: np.ndarray
    meta: tuple
    generator: dict | None = field(default=None)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        check_crops(images)
        if len(images) != len(self.meta):
            raise DataError("images and metadata have different lengths")
        ids = [m.sample_id for m in self.meta]
        if len(set(ids)) != len(ids):
            raise DataError("sample_ids are not unique")
        images.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "meta", tuple(self.meta))

    def __len__(self) -> int:
        return len(self.meta)

    def __iter__(self) -> Iterator[tuple[np.ndarray, SampleMeta]]:
        return iter(zip(self.images, self.meta))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.images, other.images)

    @property
    def sample_ids(self) -> list[str]:
        return [m.sample_id for m in self.meta]

    @property
    def labels(self) -> np.ndarray:
        """1 for drug, 0 for control."""
        return np.array([m.is_drug for m in self.meta], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = np.asarray(list(indices), dtype=np.int64)
        return Dataset(self.images[idx], tuple(self.meta[i] for i in idx), self.generator)

    def select_ids(self, ids: Iterable[str]) -> "Dataset":
        """Subset keeping dataset order."""
        wanted = set(ids)
        return self.subset(i for i, m in enumerate(self.meta) if m.sample_id in wanted)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.astype("<f4").tobytes())
        h.update(_meta_csv_bytes(self.meta))
        return h.hexdigest()


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple
    val_ids: tuple
    val_fraction: float
    seed: int

    def to_json(self) -> dict:
        return {
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "val_fraction": self.val_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        return cls(tuple(obj["train_ids"]), tuple(obj["val_ids"]), obj["val_fraction"], obj["seed"])


# ---------------------------------------------------------------------------
# serialization


def _meta_csv_bytes(meta: Sequence[SampleMeta]) -> bytes:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=META_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for m in meta:
        writer.writerow(m.to_row())
    return buf.getvalue().encode("utf-8")


def read_meta_csv(path: str | os.PathLike, control_marker: str = CONTROL_MARKER) -> list[SampleMeta]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [SampleMeta.from_row(row, control_marker) for row in csv.DictReader(fh)]


def save_dataset(dataset: Dataset, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images.f32").write_bytes(dataset.images.astype("<f4").tobytes())
    (out / "meta.csv").write_bytes(_meta_csv_bytes(dataset.meta))
    manifest = {"n": len(dataset), "checksum": dataset.checksum(), "generator": dataset.generator}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        raw = (root / "images.f32").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"not a dataset directory: {root} ({exc.filename} missing)") from exc
    meta = read_meta_csv(root / "meta.csv")
    n = manifest["n"]
    if len(raw) != n * CROP_SIZE * CROP_SIZE * 4 or len(meta) != n:
        raise DataError(f"{root}: size mismatch with manifest (n={n})")
    images = np.frombuffer(raw, dtype="<f4").reshape(n, CROP_SIZE, CROP_SIZE)
    ds = Dataset(images, tuple(meta), manifest.get("generator"))
    if ds.checksum() != manifest["checksum"]:
        raise DataError(f"{root}: checksum mismatch")
    return ds


# ---------------------------------------------------------------------------
# ingestion

_IMAGE_SUFFIXES = {".png", ".tif", ".tiff"}


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    if arr.shape != (CROP_SIZE, CROP_SIZE):
        raise DataError(f"{path}: expected 64x64, got {arr.shape[1]}x{arr.shape[0]}")
    return arr.astype(np.float32) / np.float32(255.0)


def ingest_folder(
    root_path: str | os.PathLike,
    metadata_table_path: str | os.PathLike,
    control_marker: str = CONTROL_MARKER,
) -> Dataset:
    """Decode a folder of 8-bit grayscale crops annotated by a CSV table.

    The table needs the columns in META_COLUMNS plus ``filename`` (relative to
    ``root_path``). Rows keep table order.
    """
    root = Path(root_path)
    with open(metadata_table_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = set(META_COLUMNS) | {"filename"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise DataError(f"metadata table must have columns {sorted(needed)}")
        rows = list(reader)

    referenced = {row["filename"] for row in rows}
    on_disk = {
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES
    }
    missing_files = sorted(referenced - on_disk)
    if missing_files:
        raise DataError("metadata references missing image files: " + ", ".join(
            str(root / f) for f in missing_files))
    unannotated = sorted(on_disk - referenced)
    if unannotated:
        raise DataError("no metadata row for image files: " + ", ".join(
            str(root / f) for f in unannotated))

    images = np.empty((len(rows), CROP_SIZE, CROP_SIZE), dtype=np.float32)
    meta = []
    for i, row in enumerate(rows):
        meta.append(SampleMeta.from_row(row, control_marker))
        images[i] = _decode(root / row["filename"])
    return Dataset(images, tuple(meta))


# ---------------------------------------------------------------------------
# balancing and splitting


def balance_subset(dataset: Dataset, seed: int) -> Dataset:
    """Equal-sized drug/control subset.

    Drug samples are restricted to the maximum concentration level and, per
    (cell_line, drug), the latest time point at that level; controls are
    kept at every time point. The majority label is then downsampled
    uniformly at random. Dataset order is preserved.
    """
    latest: dict[tuple[str, str], float] = {}
    for m in dataset.meta:
        if m.is_drug and m.concentration_level == MAX_CONCENTRATION_LEVEL:
            key = (m.cell_line, m.drug)
            latest[key] = max(latest.get(key, -math.inf), m.time_point)

    drug_idx = [
        i for i, m in enumerate(dataset.meta)
        if m.is_drug
        and m.concentration_level == MAX_CONCENTRATION_LEVEL
        and m.time_point == latest[(m.cell_line, m.drug)]
    ]
    control_idx = [i for i, m in enumerate(dataset.meta) if not m.is_drug]
    if not drug_idx:
        raise DataError("missing label: drug")
    if not control_idx:
        raise DataError("missing label: control")

    rng = np.random.default_rng(seed)
    n = min(len(drug_idx), len(control_idx))
    if len(drug_idx) > n:
        drug_idx = sorted(rng.choice(drug_idx, size=n, replace=False).tolist())
    if len(control_idx) > n:
        control_idx = sorted(rng.choice(control_idx, size=n, replace=False).tolist())
    return dataset.subset(sorted(drug_idx + control_idx))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(dataset: Dataset, val_fraction: float, seed: int) -> DatasetSplit:
    """Label-stratified train/validation split with |val| = round(val_fraction * N)."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must be in (0, 1), got {val_fraction}")
    labels = [m.label for m in dataset.meta]
    groups = {lab: [i for i, x in enumerate(labels) if x == lab] for lab in LABELS}
    groups = {k: v for k, v in groups.items() if v}

    total = _round_half_up(val_fraction * len(dataset))
    quota = {k: int(math.floor(val_fraction * len(v))) for k, v in groups.items()}
    remainders = sorted(
        groups, key=lambda k: (-(val_fraction * len(groups[k]) - quota[k]), LABELS.index(k))
    )
    for k in remainders[: total - sum(quota.values())]:
        quota[k] += 1

    rng = np.random.default_rng(seed)
    val = set()
    for lab in LABELS:
        if lab in groups:
            members = np.asarray(groups[lab])
            val.update(rng.permutation(members)[: quota[lab]].tolist())
    ids = dataset.sample_ids
    return DatasetSplit(
        train_ids=tuple(ids[i] for i in range(len(ids)) if i not in val),
        val_ids=tuple(ids[i] for i in sorted(val)),
        val_fraction=val_fraction,
        seed=seed,
    )
