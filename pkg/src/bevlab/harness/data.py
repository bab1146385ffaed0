"""Synthetic dataset: scenes, sensor observations and HR/LR labels."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..bevgrid import BevScope
from ..scenegen import (CLASSES, VectorScene, area_fraction, generate_scene, lr_label, rasterize,
                        simulate_camera, simulate_lidar)
from ..sensors import flatten_z, voxelize
from .config import ExperimentConfig

MAX_RESAMPLE = 1000


@dataclass
class Split:
    scenes: list[VectorScene]
    lidar: np.ndarray          # (n, d, w, f) flattened voxel maps on the LR grid
    images: np.ndarray         # (n, Hi, Wi, 3)
    hr_labels: np.ndarray      # (n, D, W, classes)
    lr_labels: np.ndarray      # (n, d, w, classes)

    def __len__(self) -> int:
        return len(self.scenes)


@dataclass
class Dataset:
    train: Split
    val: Split
    hr_scope: BevScope
    lr_scope: BevScope
    classes: tuple[str, ...] = CLASSES


def scene_seeds(cfg: ExperimentConfig) -> list[int]:
    """Deterministic scene seeds; scenes outside the drivable-area bounds are skipped."""
    ds = cfg.raw["dataset"]
    lo, hi = ds["drivable_bounds"]
    n = ds["n_train"] + ds["n_val"]
    stream = np.random.SeedSequence([int(ds["seed"]), 7919]).generate_state(n + MAX_RESAMPLE)
    seeds = []
    params = cfg.scene_params
    for cand in stream:
        scene = generate_scene(int(cand), params)
        frac = area_fraction(rasterize(scene, cfg.hr_scope), "drivable")
        if lo <= frac <= hi:
            seeds.append(int(cand))
            if len(seeds) == n:
                return seeds
    raise ValueError(f"could not find {n} scenes with drivable fraction in [{lo}, {hi}]")


def _sample(seed: int, cfg: ExperimentConfig):
    scene = generate_scene(seed, cfg.scene_params)
    hr = rasterize(scene, cfg.hr_scope)
    lr = lr_label(hr, cfg.scale, cfg.raw["dataset"]["label_policy"])
    pc = simulate_lidar(scene, (0.0, 0.0), cfg.lidar_params)
    vox = flatten_z(voxelize(pc, cfg.lr_scope, cfg.zcfg)).data
    img = simulate_camera(scene, cfg.camera)
    return scene, vox, img, hr.as_hwc(), lr.as_hwc()


def _split(samples) -> Split:
    scenes, vox, img, hr, lr = zip(*samples)
    return Split(list(scenes), np.stack(vox), np.stack(img), np.stack(hr), np.stack(lr))


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    """Per-sample work fans out over threads; results keep sample order."""
    ds = cfg.raw["dataset"]
    seeds = scene_seeds(cfg)
    workers = max(1, int(ds.get("workers", 1)))
    if workers == 1:
        samples = [_sample(s, cfg) for s in seeds]
    else:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(lambda s: _sample(s, cfg), seeds))
    n = ds["n_train"]
    return Dataset(_split(samples[:n]), _split(samples[n:]), cfg.hr_scope, cfg.lr_scope)
