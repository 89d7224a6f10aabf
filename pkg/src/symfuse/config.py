"""Run configuration: one YAML file, validated at load, with a content digest.

The digest is the SHA-256 of the canonical JSON form of the effective
configuration (file values plus command-line overrides) excluding the output
directory, so the same experiment written to two places has one digest.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .continual import StepPlan
from .dataset import PRESETS, ClassSchedule, SceneSpec, build_schedule, read_split_file
from .geometry import ProjectionConfig
from .losses import KD_VARIANTS, LossWeights
from .network import FusionConfig, ModelConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "source": "synthetic",
        "dir": None,
        "train_frames": 40,
        "eval_frames": 20,
        "num_classes": 4,
        "synthetic": {
            "height": 32, "width": 32, "min_objects": 3, "max_objects": 5,
            "density": 512, "focal": 32.0, "color_noise": 0.06, "reflectance_noise": 0.05,
        },
        "external": {
            "train": [],
            "eval": [],
            "intrinsics": None,
            "extrinsic": None,
            "label_map": None,
        },
    },
    "model": {
        "widths": [8, 16, 32, 64],
        "r": 0.5,
        "write_back": True,
        "learnable_r": False,
        "lidar_scale": 20.0,
    },
    "training": {
        "iterations": 1000,
        "warmup": 100,
        "peak_lr": 0.1,
        "adam_peak_lr": 0.003,
        "incremental_lr": [0.005, 0.0025],
        "incremental_iterations": 400,
        "momentum": 0.9,
        "weight_decay": 1e-5,
        "feature_weight": 0.01,
        "kd_weight": 1.0,
        "temperature": 1.0,
    },
    "continual": {
        "preset": "offline",
        "kd": "same",
        "inpainting": True,
        "split_file": None,
        "class_order": None,
    },
}

# seed offsets so the data, the model and the training order draw independent streams
TRAIN_DATA_OFFSET = 1_000_000
EVAL_DATA_OFFSET = 2_000_000


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    tree: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def output_dir(self) -> Path:
        out = Path(self.tree["output_dir"])
        return out if out.is_absolute() else self.base_dir / out

    @property
    def num_classes(self) -> int:
        return int(self.tree["dataset"]["num_classes"])

    @property
    def digest(self) -> str:
        tree = {k: v for k, v in self.tree.items() if k != "output_dir"}
        blob = json.dumps(tree, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def path(self, p) -> Optional[Path]:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    # typed views

    def scene_spec(self, offset: int = TRAIN_DATA_OFFSET) -> SceneSpec:
        s = self.tree["dataset"]["synthetic"]
        return SceneSpec(seed=self.seed * 10_000_000 + offset, num_classes=self.num_classes,
                         height=int(s["height"]), width=int(s["width"]),
                         min_objects=int(s["min_objects"]), max_objects=int(s["max_objects"]),
                         density=int(s["density"]), focal=float(s["focal"]),
                         color_noise=float(s["color_noise"]),
                         reflectance_noise=float(s["reflectance_noise"]))

    def projection(self) -> ProjectionConfig:
        intr = self.tree["dataset"]["external"]["intrinsics"]
        if intr is None:
            raise ConfigError("dataset.external.intrinsics is required for external data")
        return ProjectionConfig(float(intr["fx"]), float(intr["fy"]), float(intr["cx"]),
                                float(intr["cy"]), int(intr["height"]), int(intr["width"]),
                                float(intr.get("near", 0.1)))

    def model_config(self) -> ModelConfig:
        m = self.tree["model"]
        return ModelConfig(widths=tuple(int(w) for w in m["widths"]),
                           fusion=FusionConfig(float(m["r"]), bool(m["write_back"]),
                                               bool(m["learnable_r"])),
                           lidar_scale=float(m["lidar_scale"]), seed=self.seed)

    def schedule(self) -> ClassSchedule:
        c = self.tree["continual"]
        if c["split_file"]:
            return read_split_file(self.path(c["split_file"]), self.num_classes)
        return build_schedule(c["preset"], self.num_classes, c["class_order"])

    def plan(self) -> StepPlan:
        t, c = self.tree["training"], self.tree["continual"]
        kd = None if c["kd"] in (None, "none") else c["kd"]
        return StepPlan(
            schedule=self.schedule(),
            kd_variant=kd,
            inpainting=bool(c["inpainting"]),
            iterations=int(t["iterations"]),
            warmup=int(t["warmup"]),
            peak_lr=float(t["peak_lr"]),
            adam_peak_lr=float(t["adam_peak_lr"]),
            incremental_lr=tuple(float(x) for x in t["incremental_lr"]),
            incremental_iterations=(None if t["incremental_iterations"] is None
                                    else int(t["incremental_iterations"])),
            momentum=float(t["momentum"]),
            weight_decay=float(t["weight_decay"]),
            seed=self.seed,
            weights=LossWeights(float(t["feature_weight"]), float(t["kd_weight"]),
                                float(t["temperature"])),
        )

    def validate(self) -> None:
        t = self.tree
        d = t["dataset"]
        if d["source"] not in ("synthetic", "external"):
            raise ConfigError("dataset.source must be 'synthetic' or 'external'")
        if int(d["num_classes"]) < 2:
            raise ConfigError("dataset.num_classes must be at least 2")
        if int(d["train_frames"]) < 1 or int(d["eval_frames"]) < 0:
            raise ConfigError("dataset.train_frames must be >= 1 and eval_frames >= 0")
        if d["source"] == "external":
            ext = d["external"]
            if not ext["train"]:
                raise ConfigError("dataset.external.train lists no frames")
            for rec in ext["train"] + ext["eval"]:
                for key in ("scan", "labels", "image"):
                    if key not in rec or not self.path(rec[key]).is_file():
                        raise ConfigError(f"external frame {key} missing: {rec.get(key)}")
            if ext["label_map"] and not self.path(ext["label_map"]).is_file():
                raise ConfigError(f"label map {ext['label_map']} does not exist")
            self.projection()
        c = t["continual"]
        if c["kd"] not in (None, "none") and c["kd"] not in KD_VARIANTS:
            raise ConfigError(f"continual.kd must be one of {KD_VARIANTS} or 'none'")
        if c["split_file"] and not self.path(c["split_file"]).is_file():
            raise ConfigError(f"split file {c['split_file']} does not exist")
        if not (0.0 <= float(t["model"]["r"]) <= 1.0):
            raise ConfigError("model.r must be in [0, 1]")
        lr = t["training"]["incremental_lr"]
        if len(lr) != 2 or min(float(x) for x in lr) <= 0:
            raise ConfigError("training.incremental_lr needs two positive endpoints")
        try:
            self.scene_spec().validate()
            self.model_config()
            self.plan()
        except (ValueError, TypeError, KeyError) as err:
            raise ConfigError(str(err)) from err


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (YAML), apply ``overrides`` and validate."""
    tree = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            tree = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from err
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base = path.resolve().parent
    merged = _merge(DEFAULTS, tree)
    merged = _merge(merged, overrides or {})
    if merged["continual"]["preset"] not in PRESETS and not merged["continual"]["split_file"]:
        try:
            build_schedule(merged["continual"]["preset"], int(merged["dataset"]["num_classes"]),
                           merged["continual"]["class_order"])
        except ValueError as err:
            raise ConfigError(str(err)) from err
    cfg = RunConfig(merged, base)
    cfg.validate()
    return cfg
