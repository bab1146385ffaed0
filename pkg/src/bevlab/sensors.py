"""Toy sensor branches producing BEV feature maps on a shared scope.

LiDAR: voxelize points into ``(row, column, z-bin)`` cells, flatten the Z bins
into channels and run a small conv backbone.  Camera: a conv backbone emits
per-cell features and depth logits; :func:`lift_splat` weights features by the
softmax depth distribution and scatter-adds them into the BEV cell under each
unprojected point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bevgrid import BevScope, ConfigError, points_to_pixels
from .layers import ConvLayer, apply_stack
from .tensorcore import Tensor, TensorError, as_tensor, record


@dataclass
class PointCloud:
    points: np.ndarray                 # (N, 3) meters
    features: np.ndarray               # (N, F)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(len(self.points), -1)
        if feats.ndim != 2 or len(feats) != len(self.points):
            raise ValueError(f"features {feats.shape} do not match {len(self.points)} points")
        self.features = feats
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, n_features: int = 1) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, n_features)))

    def save(self, path) -> None:
        lines = [f"# x y z f... ({self.features.shape[1]} features)"]
        for p, f in zip(self.points, self.features):
            lines.append(" ".join(repr(float(v)) for v in (*p, *f)))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PointCloud":
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(t) for t in line.split()])
        if not rows:
            return cls.empty()
        arr = np.array(rows)
        return cls(arr[:, :3], arr[:, 3:])


@dataclass(frozen=True)
class ZConfig:
    z_min: float = -0.1
    z_max: float = 2.0
    z_bins: int = 7

    def __post_init__(self):
        if self.z_bins < 1 or not self.z_max > self.z_min:
            raise ConfigError("z_bins must be >= 1 and z_max > z_min")


@dataclass
class VoxelGrid:
    scope: BevScope
    z_min: float
    z_max: float
    z_bins: int
    counts: np.ndarray                 # (d, w, z_bins) int
    mean_features: np.ndarray          # (d, w, z_bins, F); zero where count == 0
    dropped: int = 0


def voxelize(pc: PointCloud, scope: BevScope, zcfg: ZConfig = ZConfig()) -> VoxelGrid:
    """Bin points into cells; points outside the XY window or Z range are dropped."""
    d, w, zb = scope.d, scope.w, zcfg.z_bins
    nf = pc.features.shape[1]
    counts = np.zeros(d * w * zb, dtype=np.int64)
    sums = np.zeros((d * w * zb, nf))
    dropped = 0
    if len(pc):
        u, v, inside = points_to_pixels(pc.points[:, :2], scope)
        z = pc.points[:, 2]
        dz = (zcfg.z_max - zcfg.z_min) / zb
        kb = np.floor((z - zcfg.z_min) / dz).astype(np.int64)
        inside &= (z >= zcfg.z_min) & (z < zcfg.z_max)
        np.clip(kb, 0, zb - 1, out=kb)
        flat = ((v * w + u) * zb + kb)[inside]
        counts += np.bincount(flat, minlength=d * w * zb)
        for j in range(nf):
            sums[:, j] = np.bincount(flat, weights=pc.features[inside, j], minlength=d * w * zb)
        dropped = int(len(pc) - inside.sum())
    occupied = counts > 0
    sums[occupied] /= counts[occupied, None]
    return VoxelGrid(scope, zcfg.z_min, zcfg.z_max, zb, counts.reshape(d, w, zb),
                     sums.reshape(d, w, zb, nf), dropped)


def flatten_z(vg: VoxelGrid) -> Tensor:
    """``(d, w, z_bins * f)`` map, ``f = 1 + F``: normalized count then mean features.

    Bins are concatenated in ascending Z order; counts are divided by the
    grid-wide maximum count.
    """
    peak = vg.counts.max() if vg.counts.size else 0
    norm = vg.counts / peak if peak > 0 else np.zeros(vg.counts.shape)
    per_voxel = np.concatenate([norm[..., None], vg.mean_features], axis=-1)
    d, w, zb, f = per_voxel.shape
    return Tensor(per_voxel.reshape(d, w, zb * f))


@dataclass
class CameraModel:
    """Pinhole camera; ``rotation``/``translation`` map camera to BEV frame.

    Camera axes: x right, y down, z along the optical axis.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]
    depth_bins: tuple[float, ...]

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.depth_bins = tuple(float(b) for b in self.depth_bins)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        bins = np.array(self.depth_bins)
        if len(bins) == 0 or np.any(bins <= 0) or np.any(np.diff(bins) <= 0):
            raise ConfigError("depth bins must be positive and strictly increasing")

    @classmethod
    def looking(cls, position=(0.0, 0.0, 4.0), yaw_deg: float = 0.0, pitch_deg: float = 25.0,
                image_size=(32, 56), fov_x_deg: float = 90.0,
                depth_bins=tuple(np.linspace(2.0, 34.0, 8))) -> "CameraModel":
        """Camera at ``position`` facing ``yaw`` (from +X toward +Y), tilted down by ``pitch``."""
        hi, wi = image_size
        f = (wi / 2) / np.tan(np.radians(fov_x_deg) / 2)
        yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
        fwd = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), -np.sin(pitch)])
        right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        return cls(f, f, wi / 2, hi / 2, rot, np.asarray(position, float), (hi, wi), depth_bins)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "image_size": list(self.image_size), "depth_bins": list(self.depth_bins)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["rotation"], d["translation"],
                   tuple(d["image_size"]), tuple(d["depth_bins"]))

    def pixel_rays(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """World-frame ray directions with unit optical-axis component, ``(..., 3)``."""
        cam = np.stack([(px - self.cx) / self.fx, (py - self.cy) / self.fy, np.ones_like(px)], -1)
        return cam @ self.rotation.T

    def unproject(self, px, py, depth) -> np.ndarray:
        """World points at optical-axis ``depth`` behind image coordinates ``(px, py)``."""
        px, py, depth = np.broadcast_arrays(np.asarray(px, float), np.asarray(py, float),
                                            np.asarray(depth, float))
        return self.translation + self.pixel_rays(px, py) * depth[..., None]

    def project(self, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Image coordinates ``(px, py)`` and optical-axis depth of world points."""
        cam = (np.asarray(pts, float) - self.translation) @ self.rotation
        z = cam[..., 2]
        return self.fx * cam[..., 0] / z + self.cx, self.fy * cam[..., 1] / z + self.cy, z


def _geometry_key(cam: CameraModel, scope: BevScope, grid: tuple[int, int]):
    return (cam.fx, cam.fy, cam.cx, cam.cy, cam.rotation.tobytes(), cam.translation.tobytes(),
            cam.image_size, cam.depth_bins, scope, grid)


_GEOMETRY_CACHE: dict = {}


def splat_geometry(cam: CameraModel, scope: BevScope, grid: tuple[int, int]) -> np.ndarray:
    """Flat BEV cell index for each (feature row, feature column, depth bin); -1 if dropped.

    Feature cell ``(i, j)`` of an ``hf x wf`` grid looks through image point
    ``((j + 0.5) Wi / wf, (i + 0.5) Hi / hf)``.
    """
    key = _geometry_key(cam, scope, grid)
    hit = _GEOMETRY_CACHE.get(key)
    if hit is not None:
        return hit
    hf, wf = grid
    hi, wi = cam.image_size
    py = (np.arange(hf) + 0.5) * hi / hf
    px = (np.arange(wf) + 0.5) * wi / wf
    pyg, pxg = np.meshgrid(py, px, indexing="ij")
    depths = np.array(cam.depth_bins)
    pts = cam.unproject(pxg[..., None], pyg[..., None], depths[None, None, :])  # (hf, wf, D, 3)
    u, v, inside = points_to_pixels(pts[..., :2], scope)
    idx = np.where(inside, v * scope.w + u, -1)
    idx.setflags(write=False)
    if len(_GEOMETRY_CACHE) > 32:
        _GEOMETRY_CACHE.clear()
    _GEOMETRY_CACHE[key] = idx
    return idx


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def lift_splat(image_feat, depth_logits, cam: CameraModel, scope: BevScope) -> Tensor:
    """Scatter depth-weighted image features into BEV cells.

    Output ``(d, w, C)`` (or batched).  Each (cell, bin) contributes
    ``softmax(depth)[bin] * feature`` to the BEV cell containing its
    unprojected point; contributions landing outside the scope are dropped.
    """
    feat, logits = as_tensor(image_feat), as_tensor(depth_logits)
    fa, la = feat.data, logits.data
    squeeze = fa.ndim == 3
    if squeeze:
        fa, la = fa[None], la[None]
    if fa.shape[:3] != la.shape[:3]:
        raise TensorError(f"feature grid {fa.shape[1:3]} != depth grid {la.shape[1:3]}")
    n, hf, wf, c = fa.shape
    nd = len(cam.depth_bins)
    if la.shape[-1] != nd:
        raise TensorError(f"expected {nd} depth logits, got {la.shape[-1]}")
    idx = splat_geometry(cam, scope, (hf, wf))
    vi, vj, vd = np.nonzero(idx >= 0)
    cells = idx[vi, vj, vd]
    dw = scope.d * scope.w
    target = (np.arange(n)[:, None] * dw + cells[None, :]).ravel()
    prob = _softmax(la)
    vals = prob[:, vi, vj, vd, None] * fa[:, vi, vj, :]          # (n, M, C)
    out = np.empty((n * dw, c))
    for ch in range(c):
        out[:, ch] = np.bincount(target, weights=vals[..., ch].ravel(), minlength=n * dw)
    out = out.reshape(n, scope.d, scope.w, c)

    def backward(g):
        g = (g[None] if squeeze else g).reshape(n, dw, c)
        full = np.zeros((n, hf, wf, nd, c))
        full[:, vi, vj, vd, :] = g[:, cells, :]
        gfeat = np.einsum("nijd,nijdc->nijc", prob, full)
        gprob = np.einsum("nijc,nijdc->nijd", fa, full)
        glog = prob * (gprob - (gprob * prob).sum(axis=-1, keepdims=True))
        if squeeze:
            gfeat, glog = gfeat[0], glog[0]
        return gfeat, glog

    return record(out[0] if squeeze else out, (feat, logits), backward)


@dataclass
class LidarBackbone:
    """Conv stack over the flattened voxel map; stride-2 layers halve the grid."""
    layers: list[ConvLayer] = field(default_factory=list)

    @classmethod
    def build(cls, cin: int, widths: list[int], strides: list[int], rng, prefix="encoder.lidar"):
        layers, c = [], cin
        for i, (wd, st) in enumerate(zip(widths, strides)):
            layers.append(ConvLayer(f"{prefix}{i}", c, wd, 3, st, relu=True, rng=rng))
            c = wd
        return cls(layers)

    @property
    def params(self):
        return [p for l in self.layers for p in l.params]

    def __call__(self, x) -> Tensor:
        return apply_stack(as_tensor(x), self.layers)


@dataclass
class CameraBackbone:
    """Strided conv trunk with a feature head and a depth-logit head."""
    trunk: list[ConvLayer]
    feat_head: ConvLayer
    depth_head: ConvLayer

    @classmethod
    def build(cls, c_mid: int, c_out: int, n_depth: int, rng, prefix="encoder.camera"):
        trunk = [ConvLayer(f"{prefix}.trunk0", 3, c_mid, 3, 2, relu=True, rng=rng),
                 ConvLayer(f"{prefix}.trunk1", c_mid, c_mid, 3, 1, relu=True, rng=rng)]
        feat = ConvLayer(f"{prefix}.feat", c_mid, c_out, 1, 1, relu=True, rng=rng)
        depth = ConvLayer(f"{prefix}.depth", c_mid, n_depth, 1, 1, relu=False, rng=rng, gain=1.0)
        return cls(trunk, feat, depth)

    @property
    def params(self):
        return [p for l in (*self.trunk, self.feat_head, self.depth_head) for p in l.params]

    def __call__(self, img) -> tuple[Tensor, Tensor]:
        h = apply_stack(as_tensor(img), self.trunk)
        return self.feat_head(h), self.depth_head(h)


def lidar_backbone(x, backbone: LidarBackbone) -> Tensor:
    return backbone(x)


def camera_backbone(img, backbone: CameraBackbone) -> tuple[Tensor, Tensor]:
    return backbone(img)
