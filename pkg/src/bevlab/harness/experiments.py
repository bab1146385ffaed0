"""Experiment commands: each writes CSVs (plus checkpoints or rasters) into an output directory.

CSV contents are pure functions of the config.  Wall-clock timings go to a
separate ``timing.json`` so reruns stay byte-identical.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..bevgrid import BevScope, ConfigError
from ..costmodel import attention_slope_ratio, estimate, hr_throughout, measure_peak, sweep_msa
from ..restore import PRE_RESTORE, PipelineModel
from ..scenegen import CLASSES, rasterize, simulate_camera, simulate_lidar
from ..sensors import flatten_z, voxelize
from ..tensorcore import Tape, Tensor, backward, sigmoid, sigmoid_focal_loss
from .config import ExperimentConfig, derive_rng
from .data import Dataset, build_dataset
from .render import render_map, side_by_side, to_uint8, write_ppm
from .train import (FINAL_GROUPS, STAGE_A_GROUPS, EvalResult, build_model, eval_miou,
                    load_groups, lr_features, save_groups, train_single_stage, train_stage_a,
                    train_stage_b)

UPSAMPLERS = ("nearest", "bilinear", "bicubic", "deconvolution", "restore")
SCALES = (1, 2, 4, 8)
MSA_KS = (0, 1, 2, 4, 8)


def fmt(x: float) -> str:
    return f"{x:.6f}"


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class Run:
    """Output directory bookkeeping: config echo, timings."""

    def __init__(self, cfg: ExperimentConfig, out_dir, name: str):
        self.cfg = cfg
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(cfg.to_json() + "\n")
        self.name = name
        self.timing: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def lap(self, label: str, t0: float) -> None:
        self.timing[label] = round(time.perf_counter() - t0, 3)

    def close(self) -> None:
        self.timing["total"] = round(time.perf_counter() - self._t0, 3)
        (self.dir / "timing.json").write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n")


def param_count(model: PipelineModel, groups=FINAL_GROUPS) -> int:
    return sum(p.data.size for p in model.params(groups))


def iou_header() -> list[str]:
    return ["miou"] + [f"iou_{c}" for c in CLASSES]


def iou_cells(r: EvalResult) -> list[str]:
    return [fmt(r.miou)] + [fmt(v) for v in r.iou]


# ----------------------------------------------------------------------
# shared two-stage pipeline


@dataclass
class StageA:
    model: PipelineModel
    train_feats: np.ndarray
    val_feats: np.ndarray
    loss: list[float]


def run_stage_a(cfg: ExperimentConfig, data: Dataset, run: Run | None = None, tag: str = "") -> StageA:
    t0 = time.perf_counter()
    model = build_model(cfg)
    hist = train_stage_a(cfg, model, data)
    if run is not None:
        save_groups(run.dir / f"stage_a{tag}.ckpt", model, STAGE_A_GROUPS)
        run.lap(f"stage_a{tag}", t0)
    return StageA(model, lr_features(model, data.train), lr_features(model, data.val), hist.epoch_loss)


def run_stage_b(cfg: ExperimentConfig, data: Dataset, base: StageA, run: Run | None = None,
                tag: str = "") -> tuple[PipelineModel, EvalResult, list[float]]:
    t0 = time.perf_counter()
    model = build_model(cfg)
    for dst, src in zip(model.params(PRE_RESTORE), base.model.params(PRE_RESTORE)):
        if dst.name != src.name or dst.shape != src.shape:
            raise ConfigError(f"stage-A parameter {src.name} does not fit {dst.name}")
        dst.data[...] = src.data
    hist = train_stage_b(cfg, model, data, base.train_feats)
    result = eval_miou(model, data.val, cfg.raw["eval"]["threshold"], CLASSES, feats=base.val_feats)
    if run is not None:
        save_groups(run.dir / f"model{tag}.ckpt", model, FINAL_GROUPS)
        run.lap(f"stage_b{tag}", t0)
    return model, result, hist.epoch_loss


def run_single_stage(cfg: ExperimentConfig, data: Dataset, run: Run | None = None,
                     tag: str = "") -> tuple[PipelineModel, EvalResult, list[float]]:
    t0 = time.perf_counter()
    model = build_model(cfg)
    hist = train_single_stage(cfg, model, data)
    result = eval_miou(model, data.val, cfg.raw["eval"]["threshold"], CLASSES)
    if run is not None:
        save_groups(run.dir / f"model{tag}.ckpt", model, FINAL_GROUPS)
        run.lap(f"single{tag}", t0)
    return model, result, hist.epoch_loss


def bytes_per_elem(cfg: ExperimentConfig) -> int:
    return int(cfg.raw["cost"]["bytes_per_elem"])


# ----------------------------------------------------------------------
# commands


def cmd_compare_upsamplers(cfg: ExperimentConfig, out_dir) -> Path:
    """One shared stage A, then stage B once per upsampling method."""
    run = Run(cfg, out_dir, "compare-upsamplers")
    data = build_dataset(cfg)
    base = run_stage_a(cfg, data, run)
    rows = []
    for method in UPSAMPLERS:
        cm = cfg.with_method(method)
        model, res, _ = run_stage_b(cm, data, base, run, tag=f"_{method}")
        tot = estimate(cm.arch, cfg.hr_scope, bytes_per_elem(cfg), image_size=cfg.camera.image_size).totals
        rows.append([method, *iou_cells(res), param_count(model), tot["act_bytes"], tot["flops"]])
    path = write_csv(run.dir / "compare_upsamplers.csv",
                     ["method", *iou_header(), "params", "act_bytes", "flops"], rows)
    run.close()
    return path


def cmd_sweep_scale(cfg: ExperimentConfig, out_dir, scales=SCALES) -> Path:
    """Two-stage restore models per scale, plus the single-stage HR baseline."""
    run = Run(cfg, out_dir, "sweep-scale")
    hr = cfg.hr_scope
    for s in scales:
        if hr.w % s or hr.d % s:
            raise ConfigError(f"HR grid {hr.shape} not divisible by scale {s}")
    bpe = bytes_per_elem(cfg)
    header = ["variant", "scale", "lr_res", *iou_header(), "params", "act_bytes", "flops",
              "attn_slope_ratio"]
    rows = []
    base_cfg = cfg.with_method("none", scale=1)
    data = build_dataset(base_cfg)
    model, res, _ = run_single_stage(base_cfg, data, run, tag="_baseline")
    tot = estimate(base_cfg.arch, hr, bpe, image_size=cfg.camera.image_size).totals
    rows.append(["baseline", 1, fmt(hr.r_x), *iou_cells(res), param_count(model), tot["act_bytes"],
                 tot["flops"], "1"])
    for s in scales:
        cs = cfg.with_method("restore", scale=s)
        data = build_dataset(cs)
        base = run_stage_a(cs, data, run, tag=f"_x{s}")
        model, res, _ = run_stage_b(cs, data, base, run, tag=f"_x{s}")
        tot = estimate(cs.arch, hr, bpe, image_size=cfg.camera.image_size).totals
        ratio = attention_slope_ratio(sweep_msa(cs.arch, hr, 1, bpe))
        rows.append(["restore", s, fmt(cs.lr_scope.r_x), *iou_cells(res), param_count(model),
                     tot["act_bytes"], tot["flops"], str(ratio)])
    path = write_csv(run.dir / "sweep_scale.csv", header, rows)
    run.close()
    return path


def training_step(model: PipelineModel, lidar: np.ndarray, image: np.ndarray, labels: np.ndarray,
                  gamma: float = 2.0, alpha: float = 0.25):
    """Closure running one forward and backward pass over every final group."""
    def step():
        model.set_trainable(FINAL_GROUPS, True)
        with Tape() as tape:
            logits = model(Tensor(lidar.copy()), Tensor(image.copy()))
            loss = sigmoid_focal_loss(logits, labels, gamma, alpha)
        return backward(tape, loss, model.params(FINAL_GROUPS))
    return step


MEASURE_SCOPE = BevScope.square(-4.0, 4.0, 0.5)     # 16 x 16 HR grid


def measured_msa_peaks(cfg: ExperimentConfig, scale: int = 2, ks=MSA_KS,
                       scope: BevScope = MEASURE_SCOPE) -> dict[str, list[int]]:
    """Measured peak bytes of one training step per k, restore-last vs HR-throughout."""
    out = {}
    rng = derive_rng(cfg.seed, 4242)
    for variant, method, s in (("restore_last", "restore", scale), ("hr_throughout", "none", 1)):
        peaks = []
        for k in ks:
            c = cfg.override(scope=scope.to_dict(), scale=s,
                             arch={**{a: v for a, v in cfg.raw["arch"].items() if a != "scale"},
                                   "upsample_method": method, "msa_layers": k})
            model = build_model(c)
            lr, arch = c.lr_scope, c.arch
            hi, wi = c.camera.image_size
            lidar = rng.standard_normal((1, lr.d, lr.w, arch.lidar_in))
            image = rng.uniform(0, 1, (1, hi, wi, 3))
            labels = (rng.random((1, scope.d, scope.w, arch.classes)) < 0.3).astype(np.float64)
            peaks.append(measure_peak(training_step(model, lidar, image, labels)))
        out[variant] = peaks
    return out


def least_squares_slope(ks, values) -> float:
    return float(np.polyfit(np.asarray(ks, float), np.asarray(values, float), 1)[0])


def cmd_sweep_msa(cfg: ExperimentConfig, out_dir, ks=MSA_KS, measure_scale: int = 2) -> Path:
    """Analytic sweep on the configured scope and measured peaks on a 16 x 16 HR grid."""
    run = Run(cfg, out_dir, "sweep-msa")
    arch = cfg.with_method("restore").arch
    bpe = bytes_per_elem(cfg)
    pts = sweep_msa(arch, cfg.hr_scope, max(ks), bpe, ks=ks)
    t0 = time.perf_counter()
    measured = measured_msa_peaks(cfg, measure_scale, ks)
    run.lap("measure", t0)
    mcfg = cfg.with_method("restore", scale=measure_scale).override(scope=MEASURE_SCOPE.to_dict())
    mpts = sweep_msa(mcfg.arch, MEASURE_SCOPE, max(ks), 8, ks=ks)
    rows = []
    for p in pts:
        rows.append(["analytic", p.variant, cfg.scale, p.k, p.total_bytes, p.total_flops, p.attention_bytes])
    for p in mpts:
        i = list(ks).index(p.k)
        rows.append(["measured_grid_analytic", p.variant, measure_scale, p.k, p.total_bytes,
                     p.total_flops, p.attention_bytes])
        rows.append(["measured", p.variant, measure_scale, p.k, measured[p.variant][i], "", ""])
    write_csv(run.dir / "sweep_msa.csv",
              ["source", "variant", "scale", "k", "total_bytes", "total_flops", "attention_bytes"], rows)
    m_ratio = least_squares_slope(ks, measured["hr_throughout"]) / least_squares_slope(ks, measured["restore_last"])
    summary = [["analytic_attention_slope_ratio", cfg.scale, str(attention_slope_ratio(pts))],
               ["expected_s4", cfg.scale, str(cfg.scale ** 4)],
               ["measured_peak_slope_ratio", measure_scale, fmt(m_ratio)],
               ["measured_expected_s4", measure_scale, str(measure_scale ** 4)]]
    path = write_csv(run.dir / "msa_slopes.csv", ["quantity", "scale", "value"], summary)
    run.close()
    return path


def cmd_cost_report(cfg: ExperimentConfig, out_dir) -> Path:
    run = Run(cfg, out_dir, "cost-report")
    rep = estimate(cfg.arch, cfg.hr_scope, bytes_per_elem(cfg), image_size=cfg.camera.image_size)
    path = run.dir / "cost_report.csv"
    path.write_text(rep.to_csv())
    run.close()
    return path


def cmd_gen_scenes(cfg: ExperimentConfig, out_dir) -> Path:
    """Scenes, HR ground truth, point clouds and camera images for the whole dataset."""
    run = Run(cfg, out_dir, "gen-scenes")
    from .data import scene_seeds
    from ..scenegen import generate_scene
    n_train = cfg.raw["dataset"]["n_train"]
    rows = []
    for i, seed in enumerate(scene_seeds(cfg)):
        split = "train" if i < n_train else "val"
        stem = f"{split}_{i:04d}"
        scene = generate_scene(seed, cfg.scene_params)
        scene.save(run.dir / f"{stem}.scene.txt")
        gt = rasterize(scene, cfg.hr_scope)
        gt.save(run.dir, f"{stem}_gt")
        simulate_lidar(scene, (0.0, 0.0), cfg.lidar_params).save(run.dir / f"{stem}.points.txt")
        write_ppm(run.dir / f"{stem}_camera.ppm", to_uint8(simulate_camera(scene, cfg.camera)))
        rows.append([stem, split, seed, *[fmt(v) for v in gt.masks.mean(axis=(1, 2))]])
    path = write_csv(run.dir / "scenes.csv", ["stem", "split", "seed", *[f"frac_{c}" for c in CLASSES]], rows)
    run.close()
    return path


def cmd_train(cfg: ExperimentConfig, out_dir) -> Path:
    """Train the configured model (two-stage, or single-stage for method ``none``)."""
    run = Run(cfg, out_dir, "train")
    data = build_dataset(cfg)
    if cfg.arch.upsample_method == "none":
        model, res, loss = run_single_stage(cfg, data, run)
        losses = [["S", e, fmt(v)] for e, v in enumerate(loss)]
    else:
        base = run_stage_a(cfg, data, run)
        model, res, loss = run_stage_b(cfg, data, base, run)
        losses = [["A", e, fmt(v)] for e, v in enumerate(base.loss)] + [["B", e, fmt(v)] for e, v in enumerate(loss)]
    write_csv(run.dir / "loss.csv", ["stage", "epoch", "loss"], losses)
    path = write_csv(run.dir / "metrics.csv", ["method", "scale", *iou_header()],
                     [[cfg.arch.upsample_method, cfg.scale, *iou_cells(res)]])
    run.close()
    return path


def load_model(cfg: ExperimentConfig, checkpoint_path) -> PipelineModel:
    model = build_model(cfg)
    load_groups(checkpoint_path, model, FINAL_GROUPS)
    return model


def cmd_eval(cfg: ExperimentConfig, out_dir, checkpoint_path) -> Path:
    run = Run(cfg, out_dir, "eval")
    data = build_dataset(cfg)
    model = load_model(cfg, checkpoint_path)
    res = eval_miou(model, data.val, cfg.raw["eval"]["threshold"], CLASSES, hr_scope=cfg.hr_scope)
    path = write_csv(run.dir / "eval.csv", ["method", "scale", *iou_header()],
                     [[cfg.arch.upsample_method, cfg.scale, *iou_cells(res)]])
    run.close()
    return path


def render_scene(model: PipelineModel | None, scene, cfg: ExperimentConfig, out_dir, stem: str) -> list[Path]:
    """Ground truth, prediction (when a model is given) and the side-by-side panel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt = rasterize(scene, cfg.hr_scope)
    gt_img = render_map(gt.masks, gt.classes)
    paths = [write_ppm(out_dir / f"{stem}_gt.ppm", gt_img)]
    if model is not None:
        pc = simulate_lidar(scene, (0.0, 0.0), cfg.lidar_params)
        vox = flatten_z(voxelize(pc, cfg.lr_scope, cfg.zcfg)).data
        img = simulate_camera(scene, cfg.camera)
        logits = model(Tensor(vox[None]), Tensor(img[None])).data[0]
        pred = (sigmoid(logits) > cfg.raw["eval"]["threshold"]).astype(np.uint8)
        pred_img = render_map(np.moveaxis(pred, -1, 0), gt.classes)
        paths.append(write_ppm(out_dir / f"{stem}_pred.ppm", pred_img))
        paths.append(write_ppm(out_dir / f"{stem}_side.ppm", side_by_side(gt_img, pred_img)))
    return paths


def cmd_render(cfg: ExperimentConfig, out_dir, checkpoint_path=None, index: int = 0) -> list[Path]:
    from .data import scene_seeds
    from ..scenegen import generate_scene
    seeds = scene_seeds(cfg)
    n_train = cfg.raw["dataset"]["n_train"]
    seed = seeds[n_train + index]
    scene = generate_scene(seed, cfg.scene_params)
    model = load_model(cfg, checkpoint_path) if checkpoint_path else None
    return render_scene(model, scene, cfg, out_dir, f"val_{n_train + index:04d}")
