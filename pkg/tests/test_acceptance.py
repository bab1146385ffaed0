"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line in the summary.

Run with ``pytest tests/test_acceptance.py``; the training criteria (6, 7, 10)
take several minutes on one core and are marked ``slow``.
"""
import itertools
import time
from fractions import Fraction

import numpy as np
import pytest

from bevlab.bevgrid import BevScope, Kernel2, PixelCoord, downscale_scope, iter_pixels, pixel_coverage, pooled_coverage
from bevlab.costmodel import attention_slope_ratio, sweep_msa
from bevlab.harness.config import ExperimentConfig
from bevlab.harness.data import build_dataset
from bevlab.harness.experiments import (MSA_KS, cmd_compare_upsamplers, cmd_sweep_scale,
                                        least_squares_slope, measured_msa_peaks, read_csv)
from bevlab.harness.train import (PRE_RESTORE, STAGE_B_GROUPS, build_model, params_digest,
                                  train_stage_a, train_stage_b)
from bevlab.restore import ArchConfig, deconv_padding, equivalent_deconv_kernel
from bevlab.scenegen import generate_scene, rasterize
from bevlab.sensors import CameraModel, PointCloud, ZConfig, lift_splat, voxelize
from bevlab.tensorcore import (MSAParams, Parameter, add, concat, conv2d, interp_upsample,
                               msa_layer, pixel_shuffle, pixel_unshuffle, pool2d, relu,
                               sigmoid_focal_loss, transposed_conv2d)

from oracles import brute_union, grad_check, naive_voxelize


def seed_config(seed: int) -> ExperimentConfig:
    return ExperimentConfig.from_dict({"seed": seed, "dataset": {"seed": seed}})


# 1 -------------------------------------------------------------------


def test_c01_pixel_shuffle_deconvolution_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        s = (2, 4)[i % 2]
        k = (1, 3)[(i // 2) % 2]
        n, cin, c = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 4)
        h, w = rng.integers(1, 7, size=2)
        weights = rng.standard_normal((k, k, cin, s * s * c))
        x = rng.standard_normal((n, h, w, cin))
        ps = pixel_shuffle(conv2d(x, weights, padding=k // 2), s).data
        kernel = equivalent_deconv_kernel(weights, s)
        twin = transposed_conv2d(x, kernel, s, padding=deconv_padding(k, s)).data
        worst = max(worst, float(np.max(np.abs(ps - twin))))
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-12 and dt < 5, f"max |dev| {worst:.2e} (<= 1e-12), {dt:.2f} s (< 5 s)")


# 2 -------------------------------------------------------------------


def _msa_fn(heads):
    names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]

    def fn(x, *ws):
        p = MSAParams(*[Parameter(n, 0.0) for n in names])
        for prm, t in zip(p.all(), ws):
            prm.tensor = t
        return msa_layer(x, p, heads=heads)
    return fn


def gradient_cases():
    r = np.random.default_rng(7)
    n = r.standard_normal
    cam = CameraModel.looking(position=(0.0, 0.0, 2.0), pitch_deg=30.0, image_size=(6, 6),
                              depth_bins=(2.0, 4.0, 6.0, 8.0))
    bev = BevScope.square(-6.0, 6.0, 2.0)
    target = (r.random((6, 6, 4)) > 0.6).astype(float)
    msa = [n((4, 4)) * 0.5 if i % 2 == 0 else n(4) * 0.1 for i in range(8)]
    return {
        "conv": (lambda a, k, b: conv2d(a, k, b, 1, 1, relu=True), [n((6, 6, 3)), n((3, 3, 3, 2)), n(2)]),
        "conv_stride2": (lambda a, k, b: conv2d(a, k, b, 2, 1), [n((6, 6, 2)), n((3, 3, 2, 2)), n(2)]),
        "deconv": (lambda a, k, b: transposed_conv2d(a, k, 2, b), [n((3, 3, 2)), n((3, 3, 2, 3)), n(3)]),
        "deconv_cropped": (lambda a, k, b: transposed_conv2d(a, k, 2, b, padding=2),
                           [n((3, 3, 2)), n((6, 6, 2, 2)), n(2)]),
        "pixel_shuffle": (lambda a: pixel_shuffle(a, 2), [n((3, 3, 4))]),
        "pixel_unshuffle": (lambda a: pixel_unshuffle(a, 2), [n((6, 6, 1))]),
        "max_pool": (lambda a: pool2d(a, Kernel2(2, 3), "max"), [n((6, 6, 4))]),
        "average_pool": (lambda a: pool2d(a, Kernel2(2, 3), "average"), [n((6, 6, 4))]),
        "nearest": (lambda a: interp_upsample(a, 2, "nearest"), [n((3, 3, 4))]),
        "bilinear": (lambda a: interp_upsample(a, 2, "bilinear"), [n((3, 3, 4))]),
        "bicubic": (lambda a: interp_upsample(a, 2, "bicubic"), [n((3, 3, 4))]),
        "msa": (_msa_fn(2), [n((2, 3, 4)), *msa]),
        "focal_loss": (lambda z: sigmoid_focal_loss(z, target, 2.0, 0.25), [n((6, 6, 4)) * 2]),
        "lift_splat": (lambda f, l: lift_splat(f, l, cam, bev), [n((6, 6, 4)), n((6, 6, 4))]),
        "concat_relu_add": (lambda a, b: relu(add(concat([a, b]), concat([b, a]))),
                            [n((3, 3, 2)), n((3, 3, 2))]),
    }


def test_c02_gradient_suite(verdict):
    t0 = time.perf_counter()
    errs = {name: grad_check(fn, arrays) for name, (fn, arrays) in gradient_cases().items()}
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = all(e <= 1e-5 for e in errs.values()) and dt < 60
    verdict(2, ok, f"{len(errs)} ops, worst {worst} {errs[worst]:.2e} (<= 1e-5), {dt:.1f} s (< 60 s)")


# 3 -------------------------------------------------------------------


def test_c03_pooled_coverage(verdict):
    checked, mismatches = 0, 0
    for n in range(1, 17):
        scope = BevScope.square(-n / 2, n / 2, 1.0)
        for ku, kv in itertools.product(range(1, 5), repeat=2):
            if n % ku or n % kv:
                continue
            k = Kernel2(ku, kv)
            for pu in range(n // ku):
                for pv in range(n // kv):
                    u = PixelCoord(pu, pv)
                    rect, _ = pooled_coverage(u, scope, k)
                    checked += 1
                    mismatches += rect != brute_union(u, scope, k)
    # tiling: pixel footprints are disjoint and cover the window exactly
    tiles_ok = True
    for scope in (BevScope.square(0.0, 8.0, 2.0), BevScope(-3, 5, -2, 2, 0.5, 0.25),
                  BevScope.square(-4, 4, 0.5)):
        rects = [pixel_coverage(u, scope) for u in iter_pixels(scope)]
        window = Fraction(scope.ub_x - scope.lb_x) * Fraction(scope.ub_y - scope.lb_y)
        tiles_ok &= sum(Fraction(r.max_x - r.min_x) * Fraction(r.max_y - r.min_y) for r in rects) == window
        tiles_ok &= all(min(a.max_x, b.max_x) <= max(a.min_x, b.min_x)
                        or min(a.max_y, b.max_y) <= max(a.min_y, b.min_y)
                        for a, b in itertools.combinations(rects, 2))
    verdict(3, mismatches == 0 and tiles_ok,
            f"{checked} pooled cells, {mismatches} mismatches; tiling {'holds' if tiles_ok else 'broken'}")


# 4 -------------------------------------------------------------------


def test_c04_voxelization_oracle(verdict):
    scope = BevScope(-4.0, 4.0, -3.0, 3.0, 1.0, 0.5)
    zc = ZConfig(-0.5, 2.5, 3)
    rng = np.random.default_rng(4)
    n = 200
    pts = np.column_stack([rng.uniform(-5, 5, n), rng.uniform(-4, 4, n), rng.uniform(-1, 3, n)])
    pts[:10, 0] = scope.lb_x                   # exact lower edges are in scope
    pts[10:20, 1] = scope.ub_y                 # exact upper edges are not
    pc = PointCloud(pts, rng.standard_normal((n, 2)))
    vg = voxelize(pc, scope, zc)
    counts, sums, dropped = naive_voxelize(pc.points, pc.features, scope, zc)
    expect = np.zeros_like(vg.counts)
    mean = np.zeros_like(vg.mean_features)
    for key, c in counts.items():
        expect[key] = c
        mean[key] = sums[key] / c
    cells_ok = np.array_equal(vg.counts, expect) and np.allclose(vg.mean_features, mean, rtol=0, atol=1e-12)
    kept = int(vg.counts.sum())
    verdict(4, cells_ok and vg.dropped == dropped and kept + vg.dropped == n,
            f"cells {'match' if cells_ok else 'differ'}; in-scope {kept} + dropped {vg.dropped} = {n}")


# 5 -------------------------------------------------------------------


def test_c05_multires_ground_truth(verdict):
    hr_scope = BevScope.square(-16.0, 16.0, 0.5)
    lr_scope = downscale_scope(hr_scope, 4)
    bad = []
    for seed in range(100):
        scene = generate_scene(seed)
        hr = rasterize(scene, hr_scope, anchor="corner")
        lr = rasterize(scene, lr_scope, anchor="corner")
        if not np.array_equal(hr.masks[:, ::4, ::4], lr.masks):
            bad.append(seed)
    verdict(5, not bad, f"100 seeds at 0.5 -> 2.0 m/px, {len(bad)} mismatching {bad[:5]}")


# 6 and 10 ------------------------------------------------------------


@pytest.fixture(scope="module")
def compare_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("compare")
    t0 = time.perf_counter()
    tables = {}
    for seed in (0, 1, 2):
        path = cmd_compare_upsamplers(seed_config(seed), root / f"seed{seed}")
        tables[seed] = {r["method"]: float(r["miou"]) for r in read_csv(path)}
    return root, tables, time.perf_counter() - t0


@pytest.mark.slow
def test_c06_upsampler_ordering(verdict, compare_runs):
    _, tables, dt = compare_runs
    mean = {m: 100 * np.mean([t[m] for t in tables.values()]) for m in tables[0]}
    fixed = max(mean[m] for m in ("nearest", "bilinear", "bicubic"))
    gap = abs(mean["restore"] - mean["deconvolution"])
    ok = (mean["restore"] - fixed >= 2 and mean["deconvolution"] - fixed >= 2 and gap <= 1
          and dt < 15 * 60)
    detail = ", ".join(f"{m} {v:.2f}" for m, v in mean.items())
    verdict(6, ok, f"mean mIoU {detail}; margin over best fixed {mean['restore'] - fixed:.2f} / "
                   f"{mean['deconvolution'] - fixed:.2f} (>= 2), |restore - deconv| {gap:.2f} (<= 1), "
                   f"{dt / 60:.1f} min (< 15)")


@pytest.mark.slow
def test_c10_determinism(verdict, compare_runs, tmp_path):
    root, _, _ = compare_runs
    cmd_compare_upsamplers(seed_config(0), tmp_path)
    first = root / "seed0"
    names = sorted(p.name for p in first.iterdir() if p.suffix in (".csv", ".ckpt"))
    differ = [n for n in names if (first / n).read_bytes() != (tmp_path / n).read_bytes()]
    ok = not differ and len(names) > 1 and (tmp_path / "config.json").read_bytes() == (first / "config.json").read_bytes()
    verdict(10, ok, f"{len(names)} CSV/checkpoint files compared, {len(differ)} differ {differ[:3]}")


# 7 -------------------------------------------------------------------


@pytest.mark.slow
def test_c07_scale_trend(verdict, tmp_path):
    t0 = time.perf_counter()
    rows = read_csv(cmd_sweep_scale(seed_config(0), tmp_path))
    dt = time.perf_counter() - t0
    restore = {int(r["scale"]): r for r in rows if r["variant"] == "restore"}
    miou = {s: 100 * float(r["miou"]) for s, r in restore.items()}
    best = max(miou[2], miou[4])
    mem1, mem4 = int(restore[1]["act_bytes"]), int(restore[4]["act_bytes"])
    ok = best >= miou[1] and mem1 > mem4 and dt < 20 * 60
    detail = ", ".join(f"x{s} {v:.2f}" for s, v in sorted(miou.items()))
    verdict(7, ok, f"mIoU {detail}; best of x2/x4 {best:.2f} >= x1 {miou[1]:.2f}; "
                   f"act bytes x1 {mem1} > x4 {mem4}; {dt / 60:.1f} min (< 20)")


# 8 -------------------------------------------------------------------


def test_c08_attention_divergence(verdict):
    t0 = time.perf_counter()
    hr = BevScope.square(-16.0, 16.0, 0.5)
    analytic = {s: attention_slope_ratio(sweep_msa(ArchConfig(scale=s), hr, 8, ks=MSA_KS))
                for s in (2, 4, 8)}
    exact = all(r == s ** 4 and isinstance(r, Fraction) for s, r in analytic.items())
    peaks = measured_msa_peaks(seed_config(0), scale=2, ks=MSA_KS)
    ratio = least_squares_slope(MSA_KS, peaks["hr_throughout"]) / least_squares_slope(MSA_KS, peaks["restore_last"])
    dt = time.perf_counter() - t0
    ok = exact and 0.5 * 16 <= ratio <= 2 * 16 and dt < 5 * 60
    verdict(8, ok, f"analytic {', '.join(f's={s}: {r}' for s, r in analytic.items())} (= s^4); "
                   f"measured s=2 {ratio:.2f} in [8, 32]; {dt:.1f} s (< 300 s)")


# 9 -------------------------------------------------------------------


@pytest.mark.parametrize("method", ["restore", "deconvolution"])
def test_c09_freeze_contract(verdict, method):
    cfg = seed_config(0).override(**{"dataset.n_train": 8, "dataset.n_val": 4,
                                     "training.stage_a.epochs": 2, "training.stage_b.epochs": 2})
    cfg = cfg.with_method(method)
    data = build_dataset(cfg)
    model = build_model(cfg)
    train_stage_a(cfg, model, data)
    before = params_digest(model, PRE_RESTORE)
    hist = train_stage_b(cfg, model, data)
    after = params_digest(model, PRE_RESTORE)
    trained = [p.name for p in model.params(STAGE_B_GROUPS)]
    zero = [n for n in trained if not hist.first_step_grad_norms.get(n, 0.0) > 0]
    frozen_grads = set(hist.first_step_grad_norms) - set(trained)
    ok = before == after and not zero and not frozen_grads
    verdict(9, ok, f"{method}: pre-restore sha256 {'unchanged' if before == after else 'CHANGED'}; "
                   f"{len(trained) - len(zero)}/{len(trained)} restore+decoder tensors with nonzero step-1 grads")
