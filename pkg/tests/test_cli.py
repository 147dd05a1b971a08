import json
import subprocess
import sys

import pytest
import yaml

from morphobench.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

TINY = {
    "data": {"val_fraction": 0.25, "synthetic": {"images_per_condition": 12}},
    "model": {
        "backbone": {"conv_blocks": [[4, 3, 2], [8, 3, 2], [8, 3, 2]], "latent_dim": 16},
        "byol": {"projection_size": 8, "projection_hidden_size": 8, "moving_average_decay": 0.9},
    },
    "optimizer": {"epochs": 1, "batch_size": 32},
    "probe": {"learning_rates": [0.1], "momenta": [0.9], "weight_decays": [0.0], "epochs": 5},
    "cluster": {"n_neighbors": [5], "min_cluster_size": [5]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.yaml").write_text(yaml.safe_dump(TINY))
    return root


class TestUsage:
    def test_no_command(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == EXIT_USAGE

    def test_bad_choice(self):
        with pytest.raises(SystemExit) as exc:
            main(["report", "--runs", "x", "--out", "y", "--profile", "huge"])
        assert exc.value.code == EXIT_USAGE

    def test_train_needs_one_selector(self, workspace):
        assert main(["train", "--config", str(workspace / "c.yaml")]) == EXIT_USAGE

    def test_bad_setup(self, workspace):
        assert main(["train", "--config", str(workspace / "c.yaml"), "--setup", "WSL,maybe,one_crop",
                     "--runs", str(workspace / "bad")]) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.yaml").write_text("optimiser: {epochs: 1}\n")
        assert main(["generate-data", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "d")]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["generate-data", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "d")]) == EXIT_USAGE

    def test_console_script(self):
        out = subprocess.run([sys.executable, "-m", "morphobench.cli", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "generate-data" in out.stdout


class TestDataErrors:
    def test_missing_embeddings(self, tmp_path):
        assert main(["eval-probe", "--embeddings", str(tmp_path / "none")]) == EXIT_DATA

    def test_missing_runs(self, tmp_path):
        assert main(["report", "--runs", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--setup", "WSL,aug,one_crop", "--data", str(tmp_path / "none"),
                     "--runs", str(tmp_path / "r")]) == EXIT_DATA


class TestPipeline:
    def test_stages(self, workspace, capsys):
        cfg, data, runs = str(workspace / "c.yaml"), workspace / "data", workspace / "runs"
        assert main(["generate-data", "--config", cfg, "--out", str(data)]) == EXIT_OK
        assert (data / "split.json").exists()
        assert main(["train", "--config", cfg, "--setup", "SSR,no_aug,one_crop", "--data", str(data),
                     "--runs", str(runs)]) == EXIT_OK
        [run_dir] = [p for p in runs.iterdir() if p.name.startswith("SSR")]
        emb = run_dir / "embeddings"
        assert main(["embed", "--checkpoint", str(run_dir / "checkpoint.bin"), "--data", str(data),
                     "--out", str(emb)]) == EXIT_OK
        assert json.loads((emb / "manifest.json").read_text())["latent_dim"] == 16
        assert main(["eval-similarity", "--config", cfg, "--embeddings", str(emb), "--drug1", "MTX",
                     "--drug2", "PTX", "--kind", "euclidean", "--seed", "0"]) == EXIT_OK
        assert main(["eval-probe", "--config", cfg, "--embeddings", str(emb)]) == EXIT_OK
        assert main(["eval-cluster", "--config", cfg, "--embeddings", str(emb)]) == EXIT_OK
        for name in ("similarity.csv", "similarity_hist.csv", "probe_metrics.csv", "probe_grid.csv",
                     "cluster_grid.csv", "cluster_selected.csv"):
            assert (run_dir / "eval" / name).exists(), name
        out = workspace / "report"
        assert main(["report", "--config", cfg, "--runs", str(runs), "--out", str(out), "--no-plots"]) == EXIT_OK
        lines = (out / "summary.csv").read_text().splitlines()
        assert len(lines) == 41
        ssr = [ln for ln in lines if ln.startswith("SSR,accuracy,")][0]
        assert ssr.split(",")[-5] != "NA"  # the no_aug/one_crop column was filled

    def test_failed_run_exit_code(self, workspace):
        cfg = dict(TINY, optimizer={"epochs": 2, "batch_size": 32, "learning_rate": 1e30})
        path = workspace / "explode.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["train", "--config", str(path), "--setup", "WSL,no_aug,one_crop",
                     "--runs", str(workspace / "explode")]) == EXIT_NUMERIC
