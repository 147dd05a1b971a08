"""EmbeddingSet: backbone outputs with row-aligned metadata, and its on-disk form.

Directory layout::

    embeddings.f32   little-endian float32, row-major N x latent_dim
    meta.csv         row-aligned SampleMeta
    manifest.json    {n, latent_dim, model_id, setup_id, checkpoint_checksum}
    split.json       optional train/validation split of the rows
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetSplit, _meta_csv_bytes, read_meta_csv
from .errors import DataError


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    matrix: np.ndarray
    meta: tuple
    model_id: str = ""
    setup_id: str = ""
    checkpoint_checksum: str = ""
    split: DatasetSplit | None = None

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if m.ndim != 2 or m.shape[0] != len(self.meta):
            raise DataError(f"matrix {m.shape} does not align with {len(self.meta)} metadata rows")
        if not np.all(np.isfinite(m)):
            raise DataError("embedding matrix contains non-finite values")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "meta", tuple(self.meta))

    def __len__(self):
        return len(self.meta)

    @property
    def latent_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.array([m.is_drug for m in self.meta], dtype=np.int64)

    @property
    def cell_lines(self) -> list[str]:
        seen = {}
        for m in self.meta:
            seen.setdefault(m.cell_line, None)
        return list(seen)

    def rows(self, ids) -> np.ndarray:
        """Row indices of the given sample ids, in embedding order."""
        wanted = set(ids)
        return np.array([i for i, m in enumerate(self.meta) if m.sample_id in wanted], dtype=np.int64)

    def subset(self, idx) -> "EmbeddingSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EmbeddingSet(self.matrix[idx], tuple(self.meta[i] for i in idx), self.model_id,
                            self.setup_id, self.checkpoint_checksum, self.split)


def save_embeddings(emb: EmbeddingSet, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "embeddings.f32").write_bytes(emb.matrix.astype("<f4").tobytes())
    (out / "meta.csv").write_bytes(_meta_csv_bytes(emb.meta))
    manifest = {
        "n": len(emb),
        "latent_dim": emb.latent_dim,
        "model_id": emb.model_id,
        "setup_id": emb.setup_id,
        "checkpoint_checksum": emb.checkpoint_checksum,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if emb.split is not None:
        (out / "split.json").write_text(json.dumps(emb.split.to_json(), sort_keys=True) + "\n")
    return out


def load_embeddings(path: str | os.PathLike) -> EmbeddingSet:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        raw = (root / "embeddings.f32").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"not an embedding directory: {root} ({exc.filename} missing)") from exc
    meta = read_meta_csv(root / "meta.csv")
    n, dim = manifest["n"], manifest["latent_dim"]
    if len(raw) != n * dim * 4 or len(meta) != n:
        raise DataError(f"{root}: size mismatch with manifest")
    split = None
    if (root / "split.json").exists():
        split = DatasetSplit.from_json(json.loads((root / "split.json").read_text()))
    return EmbeddingSet(
        np.frombuffer(raw, dtype="<f4").reshape(n, dim), tuple(meta),
        manifest["model_id"], manifest["setup_id"], manifest["checkpoint_checksum"], split,
    )


def val_rows(emb: EmbeddingSet) -> np.ndarray:
    """Validation rows if a split is attached, otherwise every row."""
    if emb.split is None:
        return np.arange(len(emb))
    return emb.rows(emb.split.val_ids)
