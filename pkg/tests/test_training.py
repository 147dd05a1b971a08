import json
import math

import numpy as np
import pytest
import torch

from morphobench.augment import MULTI_CROP, ONE_CROP
from morphobench.checkpoint import flat_parameters
from morphobench.data import Dataset, balance_subset, split
from morphobench.embeddings import load_embeddings, save_embeddings
from morphobench.errors import ConfigError
from morphobench.models import BackboneConfig, ByolConfig, build_model, bce_reconstruction_loss
from morphobench.synthetic import SyntheticConfig, generate_synthetic
from morphobench.training import (
    ByolSearchRanges,
    EarlyStopConfig,
    OptimizerConfig,
    RunRecord,
    TrainingSetup,
    byol_hyperparameter_search,
    early_stop_check,
    embed_dataset,
    enumerate_setups,
    load_model,
    train,
    train_matrix,
)

from conftest import make_meta


@pytest.fixture(scope="module")
def balanced():
    ds = generate_synthetic(SyntheticConfig(images_per_condition=6, seed=5))
    bal = balance_subset(ds, 0)
    return bal, split(bal, 0.25, 0)


def _opt(epochs=1, lr=1e-3, bs=16):
    return OptimizerConfig(learning_rate=lr, epochs=epochs, batch_size=bs)


class TestSetups:
    def test_sixteen(self):
        setups = enumerate_setups()
        assert len(setups) == 16
        assert len({s.setup_id for s in setups}) == 16

    def test_icl_only(self):
        assert len(enumerate_setups(models=("ICL",))) == 4
        assert len(enumerate_setups(models=("ICL",), icl_double_augment=True)) == 8

    def test_parse(self):
        s = TrainingSetup.parse("icl,no_aug,multi_crop", seed=3)
        assert (s.model, s.augment, s.crop, s.seed) == ("ICL", False, MULTI_CROP, 3)
        assert s.column == "no_aug/multi_crop"

    @pytest.mark.parametrize("text", ["WSL,aug", "WSL,yes,one_crop", "XYZ,aug,one_crop", "WSL,aug,one_crop,double"])
    def test_parse_rejects(self, text):
        with pytest.raises(ConfigError):
            TrainingSetup.parse(text)


class TestEarlyStop:
    cfg = EarlyStopConfig(0.05, 3)

    def test_hand_trace(self):
        # running min 0.5 -> threshold 0.525; 0.6 exceeds it three times
        assert early_stop_check([1.0, 0.5, 0.6, 0.6, 0.6], self.cfg)

    def test_decreasing(self):
        assert not early_stop_check([5, 4, 3, 2, 1], self.cfg)

    def test_short_after_minimum(self):
        assert not early_stop_check([1.0, 0.5, 0.6, 0.6], self.cfg)

    def test_recovery_resets(self):
        assert not early_stop_check([1.0, 0.5, 0.6, 0.52, 0.6, 0.6], self.cfg)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            EarlyStopConfig(0.0, 3)
        with pytest.raises(ConfigError):
            EarlyStopConfig(0.05, 0)

    def test_triggers_in_training(self, balanced, small_backbone, monkeypatch):
        import morphobench.training as tr

        monkeypatch.setattr(tr, "early_stop_check", lambda hist, cfg: len(hist) == 2)
        _, rec = train(TrainingSetup("WSL", False, ONE_CROP), *balanced, _opt(epochs=5),
                       EarlyStopConfig(), backbone_config=small_backbone)
        assert rec.epochs_completed == 2 and rec.stopped_early


class TestTrain:
    def test_zero_epochs(self, balanced, small_backbone):
        setup = TrainingSetup("SSR", True, ONE_CROP)
        model, rec = train(setup, *balanced, _opt(epochs=0), EarlyStopConfig(), backbone_config=small_backbone)
        torch.manual_seed(setup.seed)
        fresh = build_model("SSR", small_backbone)
        assert torch.equal(flat_parameters(model), flat_parameters(fresh))
        assert rec.train_loss == [] and rec.val_loss == [] and rec.epochs_completed == 0
        assert not rec.stopped_early

    @pytest.mark.parametrize("model", ["WSL", "SSL", "SSR", "ICL"])
    def test_record_shape(self, balanced, small_backbone, model):
        setup = TrainingSetup(model, True, MULTI_CROP)
        _, rec = train(setup, *balanced, _opt(epochs=2), EarlyStopConfig(), backbone_config=small_backbone,
                       byol_config=ByolConfig(8, 8, 0.9))
        assert rec.status == "complete" and rec.epochs_completed == 2
        assert len(rec.train_loss) == len(rec.val_loss) == 2
        assert len(rec.val_accuracy) == (2 if model in ("WSL", "SSR") else 0)
        assert len(rec.val_reconstruction) == (2 if model in ("SSL", "SSR") else 0)
        assert all(math.isfinite(v) for v in rec.train_loss + rec.val_loss)

    def test_deterministic(self, balanced, small_backbone, tmp_path):
        setup = TrainingSetup("ICL", True, MULTI_CROP, seed=2)
        outs = []
        for name in ("a", "b"):
            _, rec = train(setup, *balanced, _opt(epochs=2), EarlyStopConfig(), backbone_config=small_backbone,
                           byol_config=ByolConfig(8, 8, 0.9), run_dir=tmp_path / name)
            outs.append(rec)
        assert outs[0].train_loss == outs[1].train_loss and outs[0].val_loss == outs[1].val_loss
        for f in ("record.json", "checkpoint.bin"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_matters(self, balanced, small_backbone):
        a = train(TrainingSetup("WSL", True, ONE_CROP, seed=0), *balanced, _opt(), EarlyStopConfig(),
                  backbone_config=small_backbone)[1]
        b = train(TrainingSetup("WSL", True, ONE_CROP, seed=1), *balanced, _opt(), EarlyStopConfig(),
                  backbone_config=small_backbone)[1]
        assert a.train_loss != b.train_loss

    def test_timing_sum(self, balanced, small_backbone):
        _, rec = train(TrainingSetup("SSL", False, ONE_CROP), *balanced, _opt(epochs=3), EarlyStopConfig(),
                       backbone_config=small_backbone)
        assert rec.total_seconds == pytest.approx(sum(rec.epoch_seconds), rel=0.01)

    def test_non_finite_loss_marks_failure(self, balanced, small_backbone):
        # a huge learning rate on cross-entropy blows the weights up
        _, rec = train(TrainingSetup("WSL", False, ONE_CROP), *balanced, _opt(epochs=3, lr=1e30),
                       EarlyStopConfig(), backbone_config=small_backbone)
        assert rec.status == "failed" and rec.error

    def test_ssl_descends(self):
        # 200 images, default backbone and learning rate, 5 epochs
        ds = balance_subset(generate_synthetic(SyntheticConfig(images_per_condition=17, seed=1)), 0)
        assert len(ds) == 204
        sp = split(ds, 0.1, 0)
        setup = TrainingSetup("SSL", False, ONE_CROP)
        torch.manual_seed(setup.seed)
        init = build_model("SSL", BackboneConfig())
        x = torch.from_numpy(np.array(ds.select_ids(sp.train_ids).images))
        with torch.no_grad():
            initial = bce_reconstruction_loss(init(x.unsqueeze(1)), x).item()
        _, rec = train(setup, ds, sp, OptimizerConfig(epochs=5, batch_size=64), EarlyStopConfig())
        assert rec.train_loss[-1] < initial


class TestRecord:
    def test_round_trip(self, tmp_path):
        rec = RunRecord(TrainingSetup("SSL", True, ONE_CROP), run_id="x", epochs_configured=2,
                        epochs_completed=2, train_loss=[0.5, 0.25], epoch_seconds=[1.0, 2.0], total_seconds=3.0)
        rec.save(tmp_path)
        assert RunRecord.load(tmp_path) == rec
        assert "total_seconds" not in json.loads((tmp_path / "record.json").read_text())


class TestMatrix:
    def test_resume_and_filter(self, balanced, small_backbone, tmp_path):
        setups = enumerate_setups(models=("ICL",), crops=(ONE_CROP,))
        kw = dict(optimizer_config=_opt(), early_stop_config=EarlyStopConfig(), backbone_config=small_backbone,
                  byol_config=ByolConfig(8, 8, 0.9))
        first = train_matrix(*balanced, setups, tmp_path, **kw)
        assert len(first) == 2 and not any(r.from_cache for r in first)
        again = train_matrix(*balanced, setups, tmp_path, **kw)
        assert all(r.from_cache for r in again)
        assert [r.val_loss for r in again] == [r.val_loss for r in first]

    def test_failure_does_not_stop_matrix(self, balanced, small_backbone, tmp_path):
        setups = enumerate_setups(models=("WSL", "SSL"), augment=(False,), crops=(ONE_CROP,))
        recs = train_matrix(*balanced, setups, tmp_path, optimizer_config=_opt(lr=1e30, epochs=2),
                            early_stop_config=EarlyStopConfig(), backbone_config=small_backbone)
        assert len(recs) == 2
        assert recs[0].status == "failed"

    def test_load_model(self, balanced, small_backbone, tmp_path):
        setups = [TrainingSetup("SSR", True, ONE_CROP)]
        rec = train_matrix(*balanced, setups, tmp_path, optimizer_config=_opt(),
                           early_stop_config=EarlyStopConfig(), backbone_config=small_backbone)[0]
        model, meta = load_model(tmp_path / rec.run_id)
        assert meta["setup_id"] == "SSR-aug-one_crop" and meta["epoch"] == 1
        assert type(model).__name__ == "SSRModel"


class TestByolSearch:
    def test_single_trial(self, balanced, small_backbone):
        best, trials = byol_hyperparameter_search(*balanced, n_trials=1, backbone_config=small_backbone)
        assert len(trials) == 1
        assert (best.projection_size, best.projection_hidden_size) == (trials[0]["projection_size"],
                                                                       trials[0]["projection_hidden_size"])

    def test_tie_keeps_first(self, balanced, small_backbone, tmp_path):
        ranges = ByolSearchRanges((8, 8), (8, 8), (0.9, 0.9))
        best, trials = byol_hyperparameter_search(*balanced, n_trials=2, ranges=ranges,
                                                  backbone_config=small_backbone, log_path=tmp_path / "log.csv")
        assert trials[0]["val_loss"] == trials[1]["val_loss"]
        assert best == ByolConfig(8, 8, 0.9)
        assert len((tmp_path / "log.csv").read_text().splitlines()) == 3

    def test_equal_hidden_constraint(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            cfg = ByolSearchRanges(equal_hidden=True).sample(rng)
            assert cfg.projection_size == cfg.projection_hidden_size
            assert 32 <= cfg.projection_size <= 512

    def test_empty_ranges(self, balanced):
        with pytest.raises(ConfigError):
            byol_hyperparameter_search(*balanced, n_trials=1, ranges=ByolSearchRanges((64, 32)))


class TestEmbed:
    def test_shape_duplicates_round_trip(self, balanced, small_backbone, tmp_path):
        ds, sp = balanced
        model = build_model("WSL", small_backbone)
        emb = embed_dataset(model, ds, split=sp, model_id="m", setup_id="s")
        assert emb.matrix.shape == (len(ds), 16)
        imgs = np.asarray(ds.images)
        dup = Dataset(np.stack([imgs[0], imgs[0], imgs[1]]), tuple(make_meta(i) for i in range(3)))
        m = embed_dataset(model, dup).matrix
        assert np.array_equal(m[0], m[1])
        back = load_embeddings(save_embeddings(emb, tmp_path / "e"))
        assert back.matrix.tobytes() == emb.matrix.tobytes()
        assert back.meta == emb.meta and back.split == sp

    def test_independent_of_batching(self, balanced, small_backbone):
        model = build_model("SSL", small_backbone)
        a = embed_dataset(model, balanced[0], batch_size=7).matrix
        b = embed_dataset(model, balanced[0], batch_size=1000).matrix
        assert np.allclose(a, b, atol=1e-6)

    def test_augmentation_policy_unused(self, balanced, small_backbone):
        # export must not draw augmentations
        model = build_model("ICL", small_backbone, ByolConfig(8, 8, 0.9))
        a = embed_dataset(model, balanced[0]).matrix
        b = embed_dataset(model, balanced[0]).matrix
        assert a.tobytes() == b.tobytes()
