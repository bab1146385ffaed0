"""Experiment configuration loaded from JSON text."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..bevgrid import BevScope, ConfigError, downscale_scope
from ..restore import ArchConfig
from ..scenegen import LidarParams, SceneParams
from ..sensors import CameraModel, ZConfig

DEFAULTS: dict = {
    "seed": 0,
    "scope": {"lb_x": -16.0, "ub_x": 16.0, "lb_y": -16.0, "ub_y": 16.0, "r_x": 0.5, "r_y": 0.5},
    "scale": 4,
    "arch": {},
    "dataset": {
        "n_train": 64,
        "n_val": 16,
        "seed": 0,
        "scene": {},
        "lidar": {},
        "zcfg": {},
        "camera": {"position": [0.0, 0.0, 3.0], "yaw_deg": 0.0, "pitch_deg": 30.0,
                   "image_size": [32, 56], "fov_x_deg": 90.0,
                   "depth_bins": [2.0, 6.0, 10.0, 14.0, 18.0, 22.0, 26.0, 30.0]},
        "label_policy": "majority",
        "drivable_bounds": [0.1, 0.95],
        "workers": 1,
    },
    "training": {"stage_a": {"epochs": 30, "lr": 1e-3}, "stage_b": {"epochs": 30, "lr": 1e-3},
                 "batch_size": 4},
    "loss": {"gamma": 2.0, "alpha": 0.25},
    "eval": {"threshold": 0.5},
    "cost": {"bytes_per_elem": 4},
    "outputs": {"dir": "runs"},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "ExperimentConfig":
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def override(self, **changes) -> "ExperimentConfig":
        """New config with dotted-key overrides, e.g. ``override(**{"arch.c": 8})``."""
        d = copy.deepcopy(self.raw)
        for key, v in changes.items():
            node = d
            *parents, last = key.split(".")
            for p in parents:
                node = node[p]
            node[last] = v
        return ExperimentConfig.from_dict(d)

    def validate(self) -> None:
        self.lr_scope
        self.arch
        self.scene_params.validate()
        self.lidar_params
        self.zcfg
        self.camera
        ds = self.raw["dataset"]
        if ds["n_train"] < 1 or ds["n_val"] < 1:
            raise ConfigError("dataset sizes must be positive")
        if ds["label_policy"] not in ("majority", "any"):
            raise ConfigError(f"unknown label policy {ds['label_policy']!r}")
        tr = self.raw["training"]
        if tr["batch_size"] < 1:
            raise ConfigError("batch_size must be positive")
        for st in ("stage_a", "stage_b"):
            if tr[st]["epochs"] < 0 or not tr[st]["lr"] > 0:
                raise ConfigError(f"{st}: epochs must be >= 0 and lr > 0")

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    # -- typed views --------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def scale(self) -> int:
        return int(self.raw["scale"])

    @property
    def hr_scope(self) -> BevScope:
        return BevScope.from_dict(self.raw["scope"])

    @property
    def lr_scope(self) -> BevScope:
        return downscale_scope(self.hr_scope, self.scale)

    @property
    def zcfg(self) -> ZConfig:
        return ZConfig(**self.raw["dataset"]["zcfg"])

    @property
    def scene_params(self) -> SceneParams:
        return SceneParams.from_dict(self.raw["dataset"]["scene"])

    @property
    def lidar_params(self) -> LidarParams:
        return LidarParams.from_dict(self.raw["dataset"]["lidar"])

    @property
    def camera(self) -> CameraModel:
        c = self.raw["dataset"]["camera"]
        return CameraModel.looking(position=tuple(c["position"]), yaw_deg=c["yaw_deg"],
                                   pitch_deg=c["pitch_deg"], image_size=tuple(c["image_size"]),
                                   fov_x_deg=c["fov_x_deg"], depth_bins=tuple(c["depth_bins"]))

    @property
    def arch(self) -> ArchConfig:
        a = dict(self.raw["arch"])
        a.setdefault("scale", self.scale)
        if a["scale"] != self.scale:
            raise ConfigError("arch.scale disagrees with scale")
        a.setdefault("lidar_in", self.zcfg.z_bins * 2)
        a.setdefault("depth_bins", len(self.raw["dataset"]["camera"]["depth_bins"]))
        try:
            return ArchConfig(**a)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def with_method(self, method: str, scale: int | None = None) -> "ExperimentConfig":
        scale = self.scale if scale is None else scale
        arch = {k: v for k, v in self.raw["arch"].items() if k != "scale"}
        arch["upsample_method"] = method
        return self.override(scale=scale, arch=arch)


def derive_rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])
