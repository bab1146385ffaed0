"""Analytic training-cost accounting and measured peak memory.

Per layer the model counts the output elements a training step keeps alive
for the backward pass, the parameter count and multiply-add FLOPs.  Layers are
grouped into the stages encoder (sensor branches and fusion), neck, restore
and decoder; the ``cache`` row holds the sensor inputs fed to the step.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from .bevgrid import BevScope, ConfigError, downscale_scope
from .restore import ArchConfig
from .tensorcore import MemoryMeter

STAGES = ("encoder", "neck", "restore", "decoder", "cache")
CSV_HEADER = ("stage", "params", "act_elems", "act_bytes", "flops")


@dataclass(frozen=True)
class LayerCost:
    stage: str
    name: str
    params: int
    act_elems: int
    flops: int
    bev: bool = True          # lives on a BEV grid (as opposed to image space)
    attention: int = 0        # attention-matrix elements included in act_elems


@dataclass
class CostReport:
    layers: list[LayerCost]
    bytes_per_elem: int
    config: dict = field(default_factory=dict)

    def row(self, stage: str) -> dict:
        ls = [l for l in self.layers if l.stage == stage]
        elems = sum(l.act_elems for l in ls)
        return {"stage": stage, "params": sum(l.params for l in ls), "act_elems": elems,
                "act_bytes": elems * self.bytes_per_elem, "flops": sum(l.flops for l in ls)}

    @property
    def rows(self) -> list[dict]:
        return [self.row(s) for s in STAGES]

    @property
    def totals(self) -> dict:
        rows = self.rows
        out = {k: sum(r[k] for r in rows) for k in CSV_HEADER[1:]}
        return {"stage": "total", **out}

    @property
    def attention_elems(self) -> int:
        return sum(l.attention for l in self.layers)

    @property
    def attention_bytes(self) -> int:
        return self.attention_elems * self.bytes_per_elem

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        for r in self.rows + [self.totals]:
            w.writerow(r)
        return buf.getvalue()


def _conv(stage, name, h, w, cin, cout, k, stride=1, bev=True) -> LayerCost:
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = ho * wo * cout
    return LayerCost(stage, name, k * k * cin * cout + cout, out, 2 * k * k * cin * out, bev)


def _elementwise(stage, name, n, bev=True) -> LayerCost:
    return LayerCost(stage, name, 0, n, n, bev)


def estimate(arch: ArchConfig, scope: BevScope, bytes_per_elem: int = 4, batch: int = 1,
             image_size: tuple[int, int] = (32, 56)) -> CostReport:
    """Cost of one training step at the HR ``scope`` for ``arch``."""
    if bytes_per_elem < 1 or batch < 1:
        raise ConfigError("bytes_per_elem and batch must be positive")
    s = arch.scale
    lr = downscale_scope(scope, s)
    d, w = lr.d, lr.w
    a = arch
    L: list[LayerCost] = []
    hi, wi = image_size

    L.append(LayerCost("cache", "lidar_input", 0, d * w * a.lidar_in, 0, True))
    L.append(_conv("encoder", "lidar0", d, w, a.lidar_in, a.c_p, 3))
    L.append(_conv("encoder", "lidar1", d, w, a.c_p, a.c_p, 3))
    fused_in = a.c_p
    if a.use_camera:
        L.append(LayerCost("cache", "image_input", 0, hi * wi * 3, 0, False))
        hf, wf = (hi - 1) // 2 + 1, (wi - 1) // 2 + 1
        L.append(_conv("encoder", "camera.trunk0", hi, wi, 3, a.camera_mid, 3, 2, bev=False))
        L.append(_conv("encoder", "camera.trunk1", hf, wf, a.camera_mid, a.camera_mid, 3, bev=False))
        L.append(_conv("encoder", "camera.feat", hf, wf, a.camera_mid, a.c_i, 1, bev=False))
        L.append(_conv("encoder", "camera.depth", hf, wf, a.camera_mid, a.depth_bins, 1, bev=False))
        # splat: one weighted copy per (cell, bin, channel), then the BEV sum
        L.append(LayerCost("encoder", "lift_splat", 0, d * w * a.c_i, 2 * hf * wf * a.depth_bins * a.c_i))
        L.append(_elementwise("encoder", "concat", d * w * (a.c_p + a.c_i)))
        fused_in += a.c_i
    L.append(_conv("encoder", "fuser", d, w, fused_in, a.c_f, 3))

    L.append(_conv("neck", "conv1", d, w, a.c_f, a.c, 3))
    L.append(_conv("neck", "conv2", d, w, a.c, a.c, 3))
    L.append(_elementwise("neck", "add", d * w * a.c))
    L.append(_elementwise("neck", "relu", d * w * a.c))
    t = d * w
    for i in range(a.msa_layers):
        attn = a.heads * t * t
        # q, k, v, context and the residual output, plus one t x t map per head
        L.append(LayerCost("neck", f"msa{i}", 4 * (a.c * a.c + a.c), 5 * t * a.c + attn,
                           8 * t * a.c * a.c + 4 * t * t * a.c, True, attn))

    D, W = s * d, s * w
    m = a.upsample_method
    if m == "restore":
        k2 = 3 if a.restore_width == "normal" else 1
        L.append(_conv("restore", "conv1", d, w, a.c, a.c, 3))
        L.append(_conv("restore", "conv2", d, w, a.c, s * s * a.c, k2))
        L.append(LayerCost("restore", "pixel_shuffle", 0, D * W * a.c, 0))
    elif m == "deconvolution":
        ks = (3 if a.restore_width == "normal" else 1) * s
        L.append(_conv("restore", "conv1", d, w, a.c, a.c, 3))
        # every input cell stamps a ks x ks x C block; the cropped border is also computed
        L.append(LayerCost("restore", "deconv", ks * ks * a.c * a.c + a.c, D * W * a.c,
                           2 * d * w * ks * ks * a.c * a.c))
    elif m in ("nearest", "bilinear", "bicubic"):
        # separable: rows (D x d) then columns (W x w)
        L.append(LayerCost("restore", m, 0, D * W * a.c, 2 * (D * d * w + D * W * w) * a.c))

    L.append(_conv("decoder", "conv1", D, W, a.c, a.decoder_width, 3))
    L.append(_conv("decoder", "conv2", D, W, a.decoder_width, a.classes, 3))

    if batch > 1:
        L = [LayerCost(l.stage, l.name, l.params, l.act_elems * batch, l.flops * batch, l.bev,
                       l.attention * batch) for l in L]
    config = {"scope": scope.to_dict(), "s": s, "k": a.msa_layers, "method": m,
              "channels": {"c_i": a.c_i, "c_p": a.c_p, "c_f": a.c_f, "c": a.c},
              "bytes_per_elem": bytes_per_elem, "batch": batch}
    return CostReport(L, bytes_per_elem, config)


def hr_throughout(arch: ArchConfig) -> ArchConfig:
    """Same network run fully on the HR grid (no LR encoding, no upsampler)."""
    return arch.replace(scale=1, upsample_method="none")


@dataclass(frozen=True)
class SweepPoint:
    k: int
    variant: str              # "restore_last" or "hr_throughout"
    total_bytes: int
    total_flops: int
    attention_bytes: int


def sweep_msa(arch: ArchConfig, scope: BevScope, k_max: int, bytes_per_elem: int = 4,
              ks=None) -> list[SweepPoint]:
    if k_max < 1:
        raise ConfigError("k_max must be >= 1")
    ks = list(range(k_max + 1)) if ks is None else list(ks)
    out = []
    for variant, base in (("restore_last", arch), ("hr_throughout", hr_throughout(arch))):
        for k in ks:
            rep = estimate(base.replace(msa_layers=k), scope, bytes_per_elem)
            tot = rep.totals
            out.append(SweepPoint(k, variant, tot["act_bytes"], tot["flops"], rep.attention_bytes))
    return out


def slope(ks, values) -> Fraction:
    """Exact least-squares slope of ``values`` over ``ks``."""
    ks = [Fraction(k) for k in ks]
    vs = [Fraction(v) for v in values]
    n = len(ks)
    mk, mv = sum(ks) / n, sum(vs) / n
    den = sum((k - mk) ** 2 for k in ks)
    if den == 0:
        raise ValueError("need at least two distinct k")
    return sum((k - mk) * (v - mv) for k, v in zip(ks, vs)) / den


def attention_slope_ratio(points: list[SweepPoint]) -> Fraction:
    def series(variant):
        ps = sorted((p for p in points if p.variant == variant), key=lambda p: p.k)
        return [p.k for p in ps], [p.attention_bytes for p in ps]

    return slope(*series("hr_throughout")) / slope(*series("restore_last"))


def measure_peak(run: Callable[[], object]) -> int:
    """High-water mark of live tensor bytes allocated while ``run`` executes."""
    with MemoryMeter() as meter:
        run()
    return meter.peak
