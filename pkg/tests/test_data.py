import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from morphobench.data import (
    Dataset,
    SampleMeta,
    balance_subset,
    check_crop,
    ingest_folder,
    load_dataset,
    save_dataset,
    split,
)
from morphobench.errors import DataError

from conftest import make_meta, random_dataset


class TestImageCrop:
    def test_accepts_valid_crop(self):
        check_crop(np.full((64, 64), 0.5))

    @pytest.mark.parametrize("shape", [(63, 64), (64, 65), (64,), (1, 64, 64)])
    def test_rejects_wrong_shape(self, shape):
        with pytest.raises(DataError):
            check_crop(np.zeros(shape))

    @pytest.mark.parametrize("value", [-0.01, 1.01, np.nan, np.inf])
    def test_rejects_out_of_range(self, value):
        img = np.zeros((64, 64))
        img[3, 4] = value
        with pytest.raises(DataError):
            check_crop(img)


class TestSampleMeta:
    def test_label_must_be_known(self):
        with pytest.raises(DataError):
            SampleMeta("a", "CL", "MTX", 4, 0.0, "treated")

    def test_concentration_level_range(self):
        with pytest.raises(DataError):
            SampleMeta("a", "CL", "MTX", 5, 0.0, "drug")

    def test_label_drug_consistency_on_read(self):
        row = make_meta(0, drug="MTX", level=4).to_row()
        row["label"] = "control"
        with pytest.raises(DataError, match="inconsistent"):
            SampleMeta.from_row(row)


class TestDatasetIO:
    def test_duplicate_ids_rejected(self):
        m = make_meta(0)
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 64, 64)), (m, m))

    def test_images_read_only(self, tiny_dataset):
        with pytest.raises(ValueError):
            tiny_dataset.images[0, 0, 0] = 1.0

    def test_round_trip_is_exact(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert back == tiny_dataset
        assert back.sample_ids == tiny_dataset.sample_ids
        assert np.array_equal(back.images, tiny_dataset.images)

    def test_byte_layout(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "ds")
        raw = (tmp_path / "ds" / "images.f32").read_bytes()
        assert len(raw) == len(tiny_dataset) * 64 * 64 * 4
        first = np.frombuffer(raw[:64 * 64 * 4], dtype="<f4").reshape(64, 64)
        assert np.array_equal(first, tiny_dataset.images[0])
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert manifest["n"] == len(tiny_dataset)

    def test_checksum_mismatch_detected(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "ds")
        raw = bytearray((tmp_path / "ds" / "images.f32").read_bytes())
        raw[0:4] = np.float32(0.123).tobytes()
        (tmp_path / "ds" / "images.f32").write_bytes(bytes(raw))
        with pytest.raises(DataError, match="checksum"):
            load_dataset(tmp_path / "ds")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")


def _write_folder(root, rows, images):
    root.mkdir(parents=True, exist_ok=True)
    for row, img in zip(rows, images):
        Image.fromarray(img).save(root / row["filename"])
    table = root.parent / "table.csv"
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return table


def _folder_rows(n):
    rows = []
    for i in range(n):
        m = make_meta(i, drug="MTX" if i % 2 else "DMSO", level=4 if i % 2 else 0)
        rows.append({**m.to_row(), "filename": f"img{i}.png"})
    return rows


class TestIngest:
    def test_decodes_and_scales(self, tmp_path):
        rows = _folder_rows(3)
        imgs = [np.full((64, 64), v, dtype=np.uint8) for v in (0, 128, 255)]
        table = _write_folder(tmp_path / "imgs", rows, imgs)
        ds = ingest_folder(tmp_path / "imgs", table)
        assert len(ds) == 3
        assert ds.images[1, 0, 0] == pytest.approx(128 / 255)
        assert ds.images[2].max() == 1.0
        assert [m.sample_id for m in ds.meta] == [r["sample_id"] for r in rows]

    def test_missing_file_lists_paths(self, tmp_path):
        rows = _folder_rows(2)
        table = _write_folder(tmp_path / "imgs", rows[:1], [np.zeros((64, 64), np.uint8)])
        with open(table, "a", newline="") as fh:
            csv.DictWriter(fh, fieldnames=list(rows[1])).writerow(rows[1])
        with pytest.raises(DataError, match="img1.png"):
            ingest_folder(tmp_path / "imgs", table)

    def test_unannotated_file(self, tmp_path):
        rows = _folder_rows(1)
        table = _write_folder(tmp_path / "imgs", rows, [np.zeros((64, 64), np.uint8)])
        Image.fromarray(np.zeros((64, 64), np.uint8)).save(tmp_path / "imgs" / "extra.png")
        with pytest.raises(DataError, match="extra.png"):
            ingest_folder(tmp_path / "imgs", table)

    def test_wrong_size(self, tmp_path):
        rows = _folder_rows(1)
        table = _write_folder(tmp_path / "imgs", rows, [np.zeros((32, 64), np.uint8)])
        with pytest.raises(DataError, match="64x64"):
            ingest_folder(tmp_path / "imgs", table)

    def test_color_image_rejected(self, tmp_path):
        rows = _folder_rows(1)
        (tmp_path / "imgs").mkdir()
        Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(tmp_path / "imgs" / "img0.png")
        table = _write_folder(tmp_path / "imgs", rows, [])
        with pytest.raises(DataError, match="grayscale"):
            ingest_folder(tmp_path / "imgs", table)

    def test_corrupt_file(self, tmp_path):
        rows = _folder_rows(1)
        (tmp_path / "imgs").mkdir()
        (tmp_path / "imgs" / "img0.png").write_bytes(b"not a png")
        table = _write_folder(tmp_path / "imgs", rows, [])
        with pytest.raises(DataError, match="decode"):
            ingest_folder(tmp_path / "imgs", table)


class TestBalance:
    def test_downsamples_majority(self):
        ds = random_dataset(n_drug=100, n_control=300)
        out = balance_subset(ds, seed=1)
        assert int(out.labels.sum()) == 100
        assert len(out) == 200
        assert out == balance_subset(ds, seed=1)
        assert out != balance_subset(ds, seed=2)

    def test_only_max_level_latest_time(self):
        meta = [
            make_meta(0, drug="MTX", level=4, t=24.0),
            make_meta(1, drug="MTX", level=4, t=72.0),
            make_meta(2, drug="MTX", level=3, t=72.0),
            make_meta(3), make_meta(4), make_meta(5),
        ]
        ds = Dataset(np.zeros((6, 64, 64)), tuple(meta))
        out = balance_subset(ds, 0)
        drugs = [m.sample_id for m in out.meta if m.is_drug]
        assert drugs == ["s00001"]
        assert len(out) == 2

    def test_missing_label(self):
        ds = random_dataset(n_drug=0, n_control=5)
        with pytest.raises(DataError, match="missing label: drug"):
            balance_subset(ds, 0)
        ds = random_dataset(n_drug=5, n_control=0)
        with pytest.raises(DataError, match="missing label: control"):
            balance_subset(ds, 0)


class TestSplit:
    def test_ten_percent_of_thousand(self):
        ds = random_dataset(n_drug=500, n_control=500)
        sp = split(ds, 0.1, seed=0)
        assert len(sp.val_ids) == 100

    def test_hand_enumerated_stratification(self):
        # N=10, 5/5 labels, f=0.2: total round(2)=2, floor quotas 1+1
        ds = random_dataset(n_drug=5, n_control=5)
        sp = split(ds, 0.2, seed=0)
        labels = {m.sample_id: m.label for m in ds.meta}
        assert sorted(labels[i] for i in sp.val_ids) == ["control", "drug"]

    def test_deterministic(self, tiny_dataset):
        assert split(tiny_dataset, 0.3, 5) == split(tiny_dataset, 0.3, 5)

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.1, 1.5])
    def test_fraction_bounds(self, tiny_dataset, f):
        with pytest.raises(DataError):
            split(tiny_dataset, f, 0)

    @settings(max_examples=60, deadline=None)
    @given(n_drug=st.integers(1, 60), n_control=st.integers(1, 60),
           f=st.floats(0.01, 0.99), seed=st.integers(0, 2 ** 16))
    def test_partition_and_quota(self, n_drug, n_control, f, seed):
        ds = random_dataset(n_drug, n_control, seed=0)
        sp = split(ds, f, seed)
        n = len(ds)
        assert set(sp.train_ids) | set(sp.val_ids) == set(ds.sample_ids)
        assert not set(sp.train_ids) & set(sp.val_ids)
        assert len(sp.val_ids) == int(np.floor(f * n + 0.5))
        labels = {m.sample_id: m.label for m in ds.meta}
        for lab, count in (("drug", n_drug), ("control", n_control)):
            got = sum(labels[i] == lab for i in sp.val_ids)
            assert abs(got - f * count) <= 1.0 + 1e-9
