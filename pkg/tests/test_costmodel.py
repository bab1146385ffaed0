from fractions import Fraction

import numpy as np
import pytest

from bevlab.bevgrid import BevScope, ConfigError
from bevlab.costmodel import (CSV_HEADER, STAGES, attention_slope_ratio, estimate, hr_throughout,
                              measure_peak, slope, sweep_msa)
from bevlab.harness.config import ExperimentConfig
from bevlab.harness.experiments import training_step
from bevlab.harness.train import build_model
from bevlab.restore import ArchConfig
from bevlab.tensorcore import Tensor

HR = BevScope.square(-16.0, 16.0, 0.5)
ARCH = ArchConfig()
STAGE_GROUPS = {"encoder": ("encoder", "fuser"), "neck": ("neck",), "restore": ("restore",),
                "decoder": ("decoder",)}


def test_rows_and_totals():
    rep = estimate(ARCH.replace(msa_layers=2), HR)
    assert [r["stage"] for r in rep.rows] == list(STAGES)
    for key in CSV_HEADER[1:]:
        assert rep.totals[key] == sum(r[key] for r in rep.rows)
        assert all(r[key] >= 0 for r in rep.rows)
    assert rep.totals["act_bytes"] == 4 * rep.totals["act_elems"]
    rep8 = estimate(ARCH.replace(msa_layers=2), HR, 8)
    assert rep8.totals["act_bytes"] == 8 * rep.totals["act_elems"]


def test_csv_format():
    lines = estimate(ARCH, HR).to_csv().splitlines()
    assert lines[0] == "stage,params,act_elems,act_bytes,flops"
    assert [l.split(",")[0] for l in lines[1:]] == list(STAGES) + ["total"]
    assert estimate(ARCH, HR).to_csv() == estimate(ARCH, HR).to_csv()


def test_invalid():
    with pytest.raises(ConfigError):
        estimate(ARCH, HR, 0)
    with pytest.raises(ConfigError):
        estimate(ARCH.replace(scale=3), HR)


@pytest.mark.parametrize("kw", [dict(), dict(upsample_method="deconvolution"),
                                dict(upsample_method="nearest"), dict(restore_width="small"),
                                dict(scale=1, upsample_method="none", msa_layers=2),
                                dict(msa_layers=3, use_camera=False),
                                dict(upsample_method="deconvolution", restore_width="small", scale=2)])
def test_params_match_model(kw):
    cfg = ExperimentConfig.from_dict({"scale": kw.get("scale", 4),
                                      "arch": {k: v for k, v in kw.items() if k != "scale"}})
    model = build_model(cfg)
    rep = estimate(cfg.arch, cfg.hr_scope)
    for stage, groups in STAGE_GROUPS.items():
        assert rep.row(stage)["params"] == sum(p.data.size for p in model.params(groups))


def test_msa_delta():
    lr_t = 16 * 16
    a0 = estimate(ARCH, HR).totals["act_elems"]
    a1 = estimate(ARCH.replace(msa_layers=1), HR).totals["act_elems"]
    assert a1 - a0 == ARCH.heads * lr_t ** 2 + 5 * lr_t * ARCH.c


def test_encoder_bev_scaling():
    def bev_encoder(s):
        rep = estimate(ARCH.replace(scale=s, upsample_method="nearest" if s > 1 else "none"), HR)
        return sum(l.act_elems for l in rep.layers if l.stage == "encoder" and l.bev)
    base = bev_encoder(1)
    for s in (2, 4, 8):
        assert Fraction(bev_encoder(s), base) == Fraction(1, s * s)


def test_attention_ratio_s4():
    hr = estimate(hr_throughout(ARCH).replace(msa_layers=1), HR).attention_elems
    lr = estimate(ARCH.replace(msa_layers=1), HR).attention_elems
    assert hr == 256 * lr


def test_scale_covariance():
    big = BevScope.square(-32.0, 32.0, 0.5)
    a, b = estimate(ARCH.replace(msa_layers=1), HR), estimate(ARCH.replace(msa_layers=1), big)
    spatial = lambda rep: {l.name: l.act_elems - l.attention for l in rep.layers if l.bev}
    sa, sb = spatial(a), spatial(b)
    assert all(sb[k] == 4 * sa[k] for k in sa)
    assert b.attention_elems == 16 * a.attention_elems


@pytest.mark.parametrize("s", [2, 4, 8])
def test_sweep_slope_ratio(s):
    pts = sweep_msa(ARCH.replace(scale=s), HR, 4)
    assert attention_slope_ratio(pts) == s ** 4
    for variant in ("restore_last", "hr_throughout"):
        tb = [p.total_bytes for p in pts if p.variant == variant]
        tf = [p.total_flops for p in pts if p.variant == variant]
        assert all(x < y for x, y in zip(tb, tb[1:])) and all(x < y for x, y in zip(tf, tf[1:]))


@pytest.mark.parametrize("s", [2, 4, 8])
@pytest.mark.parametrize("method", ["restore", "deconvolution", "bicubic"])
def test_restore_last_below_hr_throughout(s, method):
    pts = sweep_msa(ARCH.replace(scale=s, upsample_method=method), HR, 8)
    rl = {p.k: p.total_bytes for p in pts if p.variant == "restore_last"}
    hr = {p.k: p.total_bytes for p in pts if p.variant == "hr_throughout"}
    assert all(rl[k] < hr[k] for k in range(1, 9))


def test_sweep_needs_k():
    with pytest.raises(ConfigError):
        sweep_msa(ARCH, HR, 0)


def test_exact_slope():
    assert slope([0, 1, 2, 4], [3, 5, 7, 11]) == 2
    assert slope([0, 1, 2], [0, 1, 1]) == Fraction(1, 2)


class TestMeasurePeak:
    def test_noop(self):
        assert measure_peak(lambda: None) == 0

    def test_counts_live_allocation(self):
        def run():
            a = Tensor(np.zeros(1000))
            b = Tensor(np.ones(500))
            return a, b
        assert measure_peak(run) == 1500 * 8

    def test_analytic_is_lower_bound(self):
        for kw in (dict(msa_layers=1), dict(upsample_method="deconvolution"),
                   dict(msa_layers=2, upsample_method="none")):
            scale = 1 if kw.get("upsample_method") == "none" else 2
            cfg = ExperimentConfig.from_dict({
                "scale": scale, "arch": kw,
                "scope": {"lb_x": -4.0, "ub_x": 4.0, "lb_y": -4.0, "ub_y": 4.0, "r_x": 0.5, "r_y": 0.5}})
            model = build_model(cfg)
            rng = np.random.default_rng(0)
            lr, arch = cfg.lr_scope, cfg.arch
            lidar = rng.standard_normal((1, lr.d, lr.w, arch.lidar_in))
            image = rng.uniform(0, 1, (1, 32, 56, 3))
            labels = (rng.random((1, 16, 16, 4)) < 0.3).astype(float)
            peak = measure_peak(training_step(model, lidar, image, labels))
            assert peak >= estimate(arch, cfg.hr_scope, 8).totals["act_bytes"]
