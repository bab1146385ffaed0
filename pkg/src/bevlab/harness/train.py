"""Two-stage training protocol and dataset-level evaluation.

Stage A trains the LR part of the network (sensor encoders, fusion, neck)
with a temporary LR head on down-scaled labels.  Stage B freezes those groups,
caches their LR features once and trains the upsampler and HR decoder.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from ..bevgrid import ConfigError, downscale_scope
from ..restore import PRE_RESTORE, PipelineModel
from ..tensorcore import (Adam, Tape, Tensor, TensorError, backward, checkpoint, sigmoid,
                          sigmoid_focal_loss)
from .config import ExperimentConfig, derive_rng
from .data import Dataset, Split

STAGE_A_GROUPS = ("encoder", "fuser", "neck", "lr_head")
STAGE_B_GROUPS = ("restore", "decoder")
FINAL_GROUPS = ("encoder", "fuser", "neck", "restore", "decoder")


class TrainingError(RuntimeError):
    """Non-finite loss or a broken training contract."""


def build_model(cfg: ExperimentConfig) -> PipelineModel:
    arch = cfg.arch
    return PipelineModel(arch, seed=cfg.seed, camera=cfg.camera if arch.use_camera else None,
                         lr_scope=cfg.lr_scope)


def params_digest(model: PipelineModel, groups) -> str:
    h = hashlib.sha256()
    for p in model.params(groups):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


@dataclass
class History:
    stage: str
    epoch_loss: list[float] = field(default_factory=list)
    first_step_grad_norms: dict[str, float] = field(default_factory=dict)


def _fit(cfg: ExperimentConfig, model: PipelineModel, stage: str, groups, n: int, forward,
         epochs: int, lr: float) -> History:
    """Generic Adam loop; ``forward(idx)`` returns ``(logits, target)`` under the active tape."""
    loss_cfg = cfg.raw["loss"]
    bs = cfg.raw["training"]["batch_size"]
    params = model.params(groups)
    opt = Adam(params, lr=lr)
    hist = History(stage)
    step = 0
    for epoch in range(epochs):
        rng = derive_rng(cfg.seed, ord(stage[0]), epoch)
        total, count = 0.0, 0
        for idx in _batches(n, bs, rng):
            step += 1
            try:
                with Tape() as tape:
                    logits, target = forward(idx)
                    loss = sigmoid_focal_loss(logits, target, loss_cfg["gamma"], loss_cfg["alpha"])
                grads = backward(tape, loss, params)
            except TensorError as e:
                raise TrainingError(f"stage {stage}: non-finite value at step {step} (lr={lr}): {e}") from None
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"stage {stage}: non-finite loss at step {step} (lr={lr})")
            if step == 1:
                hist.first_step_grad_norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
            opt.step(grads)
            total += value * len(idx)
            count += len(idx)
        hist.epoch_loss.append(total / count)
    return hist


def train_stage_a(cfg: ExperimentConfig, model: PipelineModel, data: Dataset) -> History:
    """Encoder, fusion and neck with the temporary LR head, on LR labels."""
    model.set_trainable(STAGE_A_GROUPS, True)
    tr = data.train

    def forward(idx):
        z = model.lr_features(Tensor(tr.lidar[idx]), Tensor(tr.images[idx]))
        return model.head_lr(z), tr.lr_labels[idx]

    st = cfg.raw["training"]["stage_a"]
    return _fit(cfg, model, "A", STAGE_A_GROUPS, len(tr), forward, st["epochs"], st["lr"])


def lr_features(model: PipelineModel, split: Split, batch: int = 8) -> np.ndarray:
    """Neck output for every sample, computed without a tape."""
    out = []
    for i in range(0, len(split), batch):
        sl = slice(i, i + batch)
        out.append(model.lr_features(Tensor(split.lidar[sl]), Tensor(split.images[sl])).data)
    return np.concatenate(out)


def train_stage_b(cfg: ExperimentConfig, model: PipelineModel, data: Dataset,
                  feats: np.ndarray | None = None) -> History:
    """Restore and decoder on HR labels, with every pre-restore group frozen.

    The digest of the frozen groups is checked before and after.
    """
    model.set_trainable(PRE_RESTORE, False)
    model.set_trainable(("lr_head",), False)
    model.set_trainable(STAGE_B_GROUPS, True)
    before = params_digest(model, PRE_RESTORE)
    tr = data.train
    feats = lr_features(model, tr) if feats is None else feats

    def forward(idx):
        return model.head_hr(Tensor(feats[idx])), tr.hr_labels[idx]

    st = cfg.raw["training"]["stage_b"]
    hist = _fit(cfg, model, "B", STAGE_B_GROUPS, len(tr), forward, st["epochs"], st["lr"])
    if params_digest(model, PRE_RESTORE) != before:
        raise TrainingError("stage B modified frozen parameters")
    return hist


def train_single_stage(cfg: ExperimentConfig, model: PipelineModel, data: Dataset) -> History:
    """End-to-end HR training of every group except the LR head (the HR-throughout baseline)."""
    groups = FINAL_GROUPS
    model.set_trainable(groups, True)
    tr = data.train

    def forward(idx):
        return model(Tensor(tr.lidar[idx]), Tensor(tr.images[idx])), tr.hr_labels[idx]

    t = cfg.raw["training"]
    epochs = t["stage_a"]["epochs"] + t["stage_b"]["epochs"]
    return _fit(cfg, model, "S", groups, len(tr), forward, epochs, t["stage_a"]["lr"])


# ----------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    classes: tuple[str, ...]
    iou: list[float]
    miou: float
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    peak_bytes: int = 0


def iou_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union counts over all leading axes."""
    pred, gt = pred.astype(bool), gt.astype(bool)
    axes = tuple(range(pred.ndim - 1))
    return (pred & gt).sum(axis=axes), (pred | gt).sum(axis=axes)


def miou_from_counts(inter: np.ndarray, union: np.ndarray) -> list[float]:
    return [1.0 if u == 0 else float(i) / float(u) for i, u in zip(inter, union)]


def predict(model: PipelineModel, split: Split, batch: int = 8, feats: np.ndarray | None = None) -> np.ndarray:
    feats = lr_features(model, split, batch) if feats is None else feats
    return np.concatenate([model.head_hr(Tensor(feats[i:i + batch])).data
                           for i in range(0, len(split), batch)])


def eval_miou(model: PipelineModel, split: Split, threshold: float = 0.5, classes=None,
              feats: np.ndarray | None = None, hr_scope=None) -> EvalResult:
    if hr_scope is not None and model.lr_scope is not None:
        if downscale_scope(hr_scope, model.arch.scale) != model.lr_scope:
            raise ConfigError("model and dataset scopes differ")
    t0 = time.perf_counter()
    logits = predict(model, split, feats=feats)
    if logits.shape != split.hr_labels.shape:
        raise ConfigError(f"prediction grid {logits.shape} != label grid {split.hr_labels.shape}")
    inter, union = iou_counts(sigmoid(logits) > threshold, split.hr_labels > 0.5)
    iou = miou_from_counts(inter, union)
    classes = tuple(classes) if classes is not None else tuple(str(i) for i in range(len(iou)))
    return EvalResult(classes, iou, float(np.mean(iou)), wall_clock=time.perf_counter() - t0)


def save_groups(path, model: PipelineModel, groups) -> None:
    checkpoint.save(path, model.params(groups))


def load_groups(path, model: PipelineModel, groups) -> None:
    checkpoint.assign(model.params(groups), checkpoint.load(path), strict=True)
