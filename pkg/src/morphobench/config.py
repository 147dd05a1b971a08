"""Experiment configuration: named presets, YAML overrides and typed accessors."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import MULTI_CROP, ONE_CROP, AugmentationPolicy
from .errors import ConfigError
from .eval_probe import ProbeConfig
from .models import MODEL_KINDS, BackboneConfig, ByolConfig
from .synthetic import SyntheticConfig
from .training import EarlyStopConfig, OptimizerConfig, TrainingSetup, enumerate_setups

FULL_PROFILE = {
    "seed": 0,
    "runs_dir": "runs",
    "data": {
        "path": None,
        "val_fraction": 0.1,
        "synthetic": {
            "n_cell_lines": 2,
            "n_drugs": 3,
            "images_per_condition": 50,
            "fragmentation_strength": [0.8, 0.8, 0.3],
            "drug_names": ["MTX", "PTX", "DRUG03"],
            "cell_line_names": ["CL01", "CL02"],
        },
    },
    "augment": {
        "resized_crop_scale": [0.5, 1.0],
        "hflip_probability": 0.5,
        "blur_probability": 0.5,
        "blur_sigma": [0.1, 2.0],
        "blur_kernel_px": 5,
    },
    "model": {
        "backbone": {"conv_blocks": [[32, 3, 2], [64, 3, 2], [128, 3, 2], [128, 3, 2]], "latent_dim": 128},
        "byol": {"projection_size": 128, "projection_hidden_size": 128, "moving_average_decay": 0.99},
    },
    "optimizer": {"algorithm": "adam", "learning_rate": 1e-4, "epochs": 50, "batch_size": 256},
    "early_stop": {"relative_margin": 0.05, "patience": 3},
    "matrix": {
        "models": list(MODEL_KINDS),
        "augment": [True, False],
        "crops": [MULTI_CROP, ONE_CROP],
        "icl_double_augment": False,
    },
    "probe": {
        "hidden_units": 256,
        "epochs": 25,
        "batch_size": 1024,
        "learning_rates": [0.1, 0.01, 0.001],
        "momenta": [0.0, 0.9],
        "weight_decays": [0.0, 1e-4, 1e-3],
    },
    "cluster": {"n_neighbors": [15, 30, 60, 100], "min_cluster_size": [30, 75, 150, 300], "min_dist": 0.1},
    "similarity": {"drug1": "MTX", "drug2": "PTX", "control": "DMSO", "kind": "euclidean"},
}

DESK_OVERRIDES = {
    "data": {"synthetic": {"images_per_condition": 167}},
    "optimizer": {"learning_rate": 1e-3, "epochs": 2, "batch_size": 64},
    "cluster": {"n_neighbors": [5, 10], "min_cluster_size": [5, 15]},
}


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; override wins, lists are replaced wholesale."""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PROFILES = {"full": FULL_PROFILE, "desk": deep_merge(FULL_PROFILE, DESK_OVERRIDES)}


def _check_keys(raw: dict, ref: dict, where: str = "") -> None:
    for k, v in raw.items():
        if k not in ref:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(v, dict) and isinstance(ref[k], dict) and k != "synthetic":
            _check_keys(v, ref[k], f"{where}{k}.")


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(PROFILES["desk"]))

    @classmethod
    def load(cls, path: str | Path | None = None, profile: str = "desk", seed: int | None = None,
             overrides: dict | None = None) -> "ExperimentConfig":
        """Preset ``profile``, then the YAML file at ``path``, then ``overrides``, then ``seed``."""
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        raw = copy.deepcopy(PROFILES[profile])
        if path is not None:
            try:
                loaded = yaml.safe_load(Path(path).read_text()) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"config {path} must be a mapping")
            _check_keys(loaded, raw)
            raw = deep_merge(raw, loaded)
        raw = deep_merge(raw, overrides or {})
        if seed is not None:
            raw["seed"] = int(seed)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        # constructing every typed section surfaces invalid values early
        self.synthetic()
        self.policy()
        self.backbone()
        self.byol()
        self.optimizer()
        self.early_stop()
        self.probe()
        self.setups()
        vf = self.val_fraction
        if not 0.0 < vf < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {vf}")
        if not self.raw["cluster"]["n_neighbors"] or not self.raw["cluster"]["min_cluster_size"]:
            raise ConfigError("empty clustering grid")

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def val_fraction(self) -> float:
        return float(self.raw["data"]["val_fraction"])

    @property
    def runs_dir(self) -> Path:
        return Path(self.raw["runs_dir"])

    def synthetic(self) -> SyntheticConfig:
        try:
            cfg = SyntheticConfig(**{"seed": self.seed, **self.raw["data"]["synthetic"]})
        except TypeError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from exc
        cfg.validate()
        return cfg

    def policy(self) -> AugmentationPolicy:
        a = self.raw["augment"]
        return AugmentationPolicy(tuple(a["resized_crop_scale"]), float(a["hflip_probability"]),
                                  float(a["blur_probability"]), tuple(a["blur_sigma"]),
                                  int(a["blur_kernel_px"]))

    def backbone(self) -> BackboneConfig:
        try:
            return BackboneConfig(**self.raw["model"]["backbone"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.backbone: {exc}") from exc

    def byol(self) -> ByolConfig:
        try:
            return ByolConfig(**self.raw["model"]["byol"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.byol: {exc}") from exc

    def optimizer(self) -> OptimizerConfig:
        o = self.raw["optimizer"]
        return OptimizerConfig(o["algorithm"], float(o["learning_rate"]), int(o["epochs"]), int(o["batch_size"]))

    def early_stop(self) -> EarlyStopConfig:
        e = self.raw["early_stop"]
        return EarlyStopConfig(float(e["relative_margin"]), int(e["patience"]))

    def probe(self) -> ProbeConfig:
        return ProbeConfig(**self.raw["probe"])

    def setups(self) -> list[TrainingSetup]:
        m = self.raw["matrix"]
        return enumerate_setups(models=tuple(m["models"]), augment=tuple(m["augment"]),
                                crops=tuple(m["crops"]), icl_double_augment=bool(m["icl_double_augment"]),
                                seed=self.seed)

    def training_blob(self) -> dict:
        """Sections that determine a training run (used for run ids)."""
        return {k: self.raw[k] for k in ("augment", "model", "optimizer", "early_stop")}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.raw, sort_keys=True))
