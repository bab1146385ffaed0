"""Procedural vector road scenes, exact rasterization and toy sensor synthesis.

A scene is a jittered grid of intersections joined by roads.  All class
geometry (drivable area, lane dividers, walkways, pedestrian crossings) is
kept as polygons and width-buffered polylines, so a semantic map can be
produced at any resolution by point-in-geometry tests at pixel sample points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bevgrid import BevScope, ConfigError, downscale_scope
from .sensors import CameraModel, PointCloud

CLASSES = ("drivable", "divider", "walkway", "crossing")


@dataclass(frozen=True)
class SceneParams:
    nodes_per_axis: tuple[int, int] = (4, 6)   # inclusive range
    spacing: float = 22.0
    jitter: float = 2.5
    road_width: tuple[float, float] = (6.0, 9.0)
    prune_prob: float = 0.3
    walkway_width: float = 2.0
    divider_width: float = 0.5
    crossing_prob: float = 0.4
    crossing_depth: float = 3.0
    building_prob: float = 0.85
    building_height: tuple[float, float] = (3.0, 12.0)

    def validate(self) -> None:
        lo, hi = self.nodes_per_axis
        if lo < 1 or hi < lo:
            raise ConfigError(f"infeasible node count range {self.nodes_per_axis}")
        if self.spacing <= 0 or self.road_width[0] <= 0 or self.road_width[1] < self.road_width[0]:
            raise ConfigError("spacing and road widths must be positive")
        if self.road_width[1] >= self.spacing:
            raise ConfigError("roads wider than node spacing")
        if not 0.0 <= self.prune_prob <= 1.0:
            raise ConfigError("prune_prob must lie in [0, 1]")
        if self.walkway_width <= 0 or self.divider_width <= 0:
            raise ConfigError("element widths must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


@dataclass
class Polygon:
    cls: str
    pts: np.ndarray            # (k, 2)


@dataclass
class Polyline:
    cls: str
    pts: np.ndarray            # (k, 2)
    width: float


@dataclass
class Box:
    cx: float
    cy: float
    hx: float
    hy: float
    height: float


@dataclass
class VectorScene:
    nodes: np.ndarray                              # (n, 2)
    edges: list[tuple[int, int, float]]            # (i, j, road width)
    polygons: list[Polygon] = field(default_factory=list)
    polylines: list[Polyline] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    bound: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)
    seed: int = 0

    @classmethod
    def empty(cls, bound=(-50.0, 50.0, -50.0, 50.0)) -> "VectorScene":
        return cls(np.zeros((0, 2)), [], bound=bound)

    # -- text format ----------------------------------------------------

    def dumps(self) -> str:
        f = lambda v: repr(float(v))  # noqa: E731  repr round-trips doubles exactly
        lines = ["# bevlab vector scene", f"seed {int(self.seed)}",
                 "bound " + " ".join(f(b) for b in self.bound)]
        lines += [f"node {f(x)} {f(y)}" for x, y in self.nodes]
        lines += [f"edge {i} {j} {f(w)}" for i, j, w in self.edges]
        for p in self.polygons:
            lines.append(f"poly {p.cls} " + " ".join(f(v) for v in p.pts.ravel()))
        for p in self.polylines:
            lines.append(f"line {p.cls} {f(p.width)} " + " ".join(f(v) for v in p.pts.ravel()))
        for b in self.boxes:
            lines.append(f"box {f(b.cx)} {f(b.cy)} {f(b.hx)} {f(b.hy)} {f(b.height)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "VectorScene":
        scene = cls.empty()
        nodes = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].split()
            if not line:
                continue
            kind, rest = line[0], line[1:]
            if kind == "seed":
                scene.seed = int(rest[0])
            elif kind == "bound":
                scene.bound = tuple(float(v) for v in rest)
            elif kind == "node":
                nodes.append((float(rest[0]), float(rest[1])))
            elif kind == "edge":
                scene.edges.append((int(rest[0]), int(rest[1]), float(rest[2])))
            elif kind == "poly":
                scene.polygons.append(Polygon(rest[0], np.array(rest[1:], float).reshape(-1, 2)))
            elif kind == "line":
                scene.polylines.append(Polyline(rest[0], np.array(rest[2:], float).reshape(-1, 2),
                                                float(rest[1])))
            elif kind == "box":
                scene.boxes.append(Box(*(float(v) for v in rest)))
            else:
                raise ValueError(f"unknown scene record {kind!r}")
        scene.nodes = np.array(nodes, float).reshape(-1, 2)
        return scene

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "VectorScene":
        return cls.loads(Path(path).read_text())


# ----------------------------------------------------------------------
# generation


def _find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


def is_connected(n: int, edges) -> bool:
    parent = list(range(n))
    for i, j, *_ in edges:
        parent[_find(parent, i)] = _find(parent, j)
    return len({_find(parent, k) for k in range(n)}) <= 1


def _rect(a, b, half_lo, half_hi, t0, t1):
    """Quad spanning lateral offsets [half_lo, half_hi] between arc lengths t0..t1 of a->b."""
    d = b - a
    length = np.hypot(*d)
    t = d / length
    nrm = np.array([-t[1], t[0]])
    p0, p1 = a + t * t0, a + t * (length - t1)
    return np.array([p0 + nrm * half_lo, p1 + nrm * half_lo, p1 + nrm * half_hi, p0 + nrm * half_hi])


def _point_segment_distance(p, a, b):
    d = b - a
    t = np.clip(np.dot(p - a, d) / np.dot(d, d), 0.0, 1.0)
    return float(np.hypot(*(p - (a + t * d))))


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> VectorScene:
    params.validate()
    rng = np.random.default_rng(seed)
    lo, hi = params.nodes_per_axis
    nx, ny = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    sp = params.spacing
    gx = (np.arange(nx) - (nx - 1) / 2) * sp
    gy = (np.arange(ny) - (ny - 1) / 2) * sp
    base = np.array([(x, y) for y in gy for x in gx])
    nodes = base + rng.uniform(-params.jitter, params.jitter, size=base.shape)

    def nid(i, j):
        return j * nx + i

    candidates = []
    for j in range(ny):
        for i in range(nx):
            if i + 1 < nx:
                candidates.append((nid(i, j), nid(i + 1, j)))
            if j + 1 < ny:
                candidates.append((nid(i, j), nid(i, j + 1)))
    # random spanning tree first, so pruning never disconnects the graph
    order = rng.permutation(len(candidates))
    parent = list(range(len(nodes)))
    keep = np.zeros(len(candidates), bool)
    for k in order:
        a, b = candidates[k]
        ra, rb = _find(parent, a), _find(parent, b)
        if ra != rb:
            parent[ra] = rb
            keep[k] = True
    extra = rng.random(len(candidates)) >= params.prune_prob
    keep |= extra
    widths = rng.uniform(*params.road_width, size=len(candidates))
    edges = [(a, b, float(widths[k])) for k, (a, b) in enumerate(candidates) if keep[k]]

    node_half = np.zeros(len(nodes))
    for a, b, w in edges:
        node_half[a] = max(node_half[a], w / 2)
        node_half[b] = max(node_half[b], w / 2)

    scene = VectorScene(nodes, edges, seed=int(seed))
    ww, dd = params.walkway_width, params.crossing_depth
    for a, b, w in edges:
        pa, pb = nodes[a], nodes[b]
        scene.polygons.append(Polygon("drivable", _rect(pa, pb, -w / 2, w / 2, 0.0, 0.0)))
        ra, rb = node_half[a], node_half[b]
        for side in (-1, 1):
            lo_off, hi_off = sorted((side * w / 2, side * (w / 2 + ww)))
            scene.polygons.append(Polygon("walkway", _rect(pa, pb, lo_off, hi_off, ra + ww, rb + ww)))
        t = (pb - pa) / np.hypot(*(pb - pa))
        scene.polylines.append(Polyline("divider", np.array([pa + t * (ra + dd), pb - t * (rb + dd)]),
                                        params.divider_width))
    for k, (x, y) in enumerate(nodes):
        h = node_half[k]
        if h > 0:
            scene.polygons.append(Polygon("drivable", np.array(
                [(x - h, y - h), (x + h, y - h), (x + h, y + h), (x - h, y + h)])))
    crossing_nodes = rng.random(len(nodes)) < params.crossing_prob
    for a, b, w in edges:
        for end, other in ((a, b), (b, a)):
            if crossing_nodes[end]:
                scene.polygons.append(Polygon("crossing", _rect(
                    nodes[end], nodes[other], -w / 2, w / 2, node_half[end],
                    np.hypot(*(nodes[other] - nodes[end])) - node_half[end] - dd)))

    # buildings in block interiors, clear of roads and walkways
    wmax = params.road_width[1]
    build_draw = rng.random((ny, nx))
    size_draw = rng.uniform(0.55, 0.9, size=(ny, nx))
    height_draw = rng.uniform(*params.building_height, size=(ny, nx))
    for j in range(ny - 1):
        for i in range(nx - 1):
            corner = [nodes[nid(i, j)], nodes[nid(i + 1, j)], nodes[nid(i + 1, j + 1)], nodes[nid(i, j + 1)]]
            c = np.mean(corner, axis=0)
            clearance = min(_point_segment_distance(c, corner[k], corner[(k + 1) % 4]) for k in range(4))
            clearance -= wmax / 2 + ww + 1.0
            half = clearance * size_draw[j, i] / np.sqrt(2)
            if build_draw[j, i] >= params.building_prob or half < 1.0:
                continue
            if abs(c[0]) < half + 2.0 and abs(c[1]) < half + 2.0:
                continue  # keep the sensor origin outside buildings
            scene.boxes.append(Box(float(c[0]), float(c[1]), float(half), float(half),
                                   float(height_draw[j, i])))

    margin = sp / 2
    scene.bound = (float(gx[0] - margin), float(gx[-1] + margin),
                   float(gy[0] - margin), float(gy[-1] + margin))
    return scene


# ----------------------------------------------------------------------
# point classification and rasterization


def _points_in_polygon(px, py, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, bool)
    xmin, ymin = poly.min(axis=0)
    xmax, ymax = poly.max(axis=0)
    cand = (px >= xmin) & (px <= xmax) & (py >= ymin) & (py <= ymax)
    if not cand.any():
        return inside
    x, y = px[cand], py[cand]
    res = np.zeros(x.shape, bool)
    n = len(poly)
    for k in range(n):
        xi, yi = poly[k]
        xj, yj = poly[(k + 1) % n]
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xj - xi) * (y - yi) / (yj - yi) + xi
        res ^= crosses & (x < xint)
    inside[cand] = res
    return inside


def _points_near_polyline(px, py, line: np.ndarray, half_width: float) -> np.ndarray:
    out = np.zeros(px.shape, bool)
    for a, b in zip(line[:-1], line[1:]):
        d = b - a
        dd = float(d @ d)
        if dd == 0.0:
            dist2 = (px - a[0]) ** 2 + (py - a[1]) ** 2
        else:
            t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / dd, 0.0, 1.0)
            dist2 = (px - (a[0] + t * d[0])) ** 2 + (py - (a[1] + t * d[1])) ** 2
        out |= dist2 <= half_width * half_width
    return out


def classify_points(scene: VectorScene, xy, classes=CLASSES) -> np.ndarray:
    """Boolean ``(..., n_classes)`` class membership of world points."""
    xy = np.asarray(xy, dtype=np.float64)
    px, py = xy[..., 0], xy[..., 1]
    out = np.zeros(px.shape + (len(classes),), bool)
    index = {c: k for k, c in enumerate(classes)}
    for p in scene.polygons:
        k = index.get(p.cls)
        if k is not None:
            out[..., k] |= _points_in_polygon(px, py, p.pts)
    for p in scene.polylines:
        k = index.get(p.cls)
        if k is not None:
            out[..., k] |= _points_near_polyline(px, py, p.pts, p.width / 2)
    return out


@dataclass
class SemanticMap:
    scope: BevScope
    classes: tuple[str, ...]
    masks: np.ndarray          # (n_classes, d, w); binary labels or real-valued predictions

    def __post_init__(self):
        if self.masks.shape != (len(self.classes), self.scope.d, self.scope.w):
            raise ValueError(f"mask shape {self.masks.shape} does not match scope {self.scope.shape}")

    def as_hwc(self) -> np.ndarray:
        return np.moveaxis(self.masks, 0, -1).astype(np.float64)

    def save(self, directory, stem: str = "map") -> list[Path]:
        """Per-class binary PGM (P5, 0/255) plus a ``.scope.txt`` sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        d, w = self.scope.shape
        for cls_name, mask in zip(self.classes, self.masks):
            path = directory / f"{stem}_{cls_name}.pgm"
            body = np.where(mask > 0, 255, 0).astype(np.uint8).tobytes()
            path.write_bytes(f"P5\n{w} {d}\n255\n".encode() + body)
            written.append(path)
        side = directory / f"{stem}.scope.txt"
        sc = self.scope
        side.write_text(f"scope {sc.lb_x!r} {sc.ub_x!r} {sc.lb_y!r} {sc.ub_y!r} {sc.r_x!r} {sc.r_y!r}\n"
                        f"classes {' '.join(self.classes)}\n")
        written.append(side)
        return written

    @classmethod
    def load(cls, directory, stem: str = "map") -> "SemanticMap":
        directory = Path(directory)
        scope, classes = None, None
        for line in (directory / f"{stem}.scope.txt").read_text().splitlines():
            parts = line.split()
            if parts and parts[0] == "scope":
                scope = BevScope(*(float(v) for v in parts[1:7]))
            elif parts and parts[0] == "classes":
                classes = tuple(parts[1:])
        if scope is None or classes is None:
            raise ValueError("incomplete semantic map sidecar")
        masks = []
        for c in classes:
            blob = (directory / f"{stem}_{c}.pgm").read_bytes()
            magic, dims, maxval, body = blob.split(b"\n", 3)
            w, d = (int(v) for v in dims.split())
            if magic != b"P5" or maxval != b"255":
                raise ValueError("unsupported PGM")
            masks.append((np.frombuffer(body, np.uint8).reshape(d, w) > 0).astype(np.uint8))
        return cls(scope, classes, np.stack(masks))


def sample_points(scope: BevScope, anchor: str = "center") -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel sample coordinates (xs over columns, ys over rows).

    ``center`` samples the cell center; ``corner`` samples the cell's lower
    corner, the only in-cell anchor that nests exactly across integer
    down-scaling (pixel ``U`` at scale ``s`` samples the same point as pixel
    ``s U`` at full resolution).
    """
    if anchor == "center":
        off = 0.5
    elif anchor == "corner":
        off = 0.0
    else:
        raise ConfigError(f"unknown sample anchor {anchor!r}")
    xs = scope.lb_x + (np.arange(scope.w) + off) * scope.r_x
    ys = scope.lb_y + (np.arange(scope.d) + off) * scope.r_y
    return xs, ys


def rasterize(scene: VectorScene, scope: BevScope, classes=CLASSES, anchor: str = "center") -> SemanticMap:
    """Mask bit is 1 iff the pixel's sample point lies inside the class geometry."""
    xs, ys = sample_points(scope, anchor)
    gx, gy = np.meshgrid(xs, ys)
    hits = classify_points(scene, np.stack([gx, gy], -1), classes)
    return SemanticMap(scope, tuple(classes), np.moveaxis(hits, -1, 0).astype(np.uint8))


def lr_label(map_hr: SemanticMap, s: int, policy: str = "majority") -> SemanticMap:
    """Block-reduce each mask by ``s``: majority vote (ties count as 1) or any-hit."""
    c, d, w = map_hr.masks.shape
    if d % s or w % s:
        raise ValueError(f"map {d}x{w} not divisible by {s}")
    hits = map_hr.masks.reshape(c, d // s, s, w // s, s).astype(np.int64).sum(axis=(2, 4))
    if policy == "majority":
        out = 2 * hits >= s * s
    elif policy == "any":
        out = hits > 0
    else:
        raise ConfigError(f"unknown label policy {policy!r}")
    return SemanticMap(downscale_scope(map_hr.scope, s), map_hr.classes, out.astype(np.uint8))


def area_fraction(m: SemanticMap, cls_name: str) -> float:
    return float(m.masks[m.classes.index(cls_name)].mean())


# ----------------------------------------------------------------------
# sensor synthesis

GROUND_HEIGHT = {"walkway": 0.25}
# lane paint and crossings are retro-reflective; asphalt is dark
INTENSITY = {"crossing": 0.85, "divider": 0.95, "walkway": 0.55, "drivable": 0.3, None: 0.1}
_PRIORITY = ("divider", "crossing", "walkway", "drivable")


@dataclass(frozen=True)
class LidarParams:
    n_rays: int = 360
    max_range: float = 20.0
    noise_sigma: float = 0.02
    ground_step: float = 1.0          # spacing of ground returns along a ray; 0 disables them
    sensor_height: float = 1.8
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "LidarParams":
        return cls(**d)


def _surface(scene: VectorScene, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ground height and reflectivity at world points by class priority."""
    member = classify_points(scene, xy)
    z = np.zeros(len(xy))
    inten = np.full(len(xy), INTENSITY[None])
    assigned = np.zeros(len(xy), bool)
    for name in _PRIORITY:
        hit = member[:, CLASSES.index(name)] & ~assigned
        inten[hit] = INTENSITY[name]
        assigned |= hit
    walk = member[:, CLASSES.index("walkway")] & ~member[:, CLASSES.index("drivable")]
    z[walk] = GROUND_HEIGHT["walkway"]
    return z, inten


def ray_box_distances(origin, dirs: np.ndarray, boxes: list[Box]) -> np.ndarray:
    """Entry distance of each unit ray into the nearest box (inf when none)."""
    best = np.full(len(dirs), np.inf)
    ox, oy = origin
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for b in boxes:
            t1 = (b.cx - b.hx - ox) * inv[:, 0]
            t2 = (b.cx + b.hx - ox) * inv[:, 0]
            t3 = (b.cy - b.hy - oy) * inv[:, 1]
            t4 = (b.cy + b.hy - oy) * inv[:, 1]
            # rays parallel to a slab produce nan; treat as unbounded when inside it
            tx_lo, tx_hi = np.fmin(t1, t2), np.fmax(t1, t2)
            ty_lo, ty_hi = np.fmin(t3, t4), np.fmax(t3, t4)
            par_x = dirs[:, 0] == 0
            par_y = dirs[:, 1] == 0
            in_x = (b.cx - b.hx <= ox) & (ox <= b.cx + b.hx)
            in_y = (b.cy - b.hy <= oy) & (oy <= b.cy + b.hy)
            tx_lo = np.where(par_x, np.where(in_x, -np.inf, np.inf), tx_lo)
            tx_hi = np.where(par_x, np.where(in_x, np.inf, -np.inf), tx_hi)
            ty_lo = np.where(par_y, np.where(in_y, -np.inf, np.inf), ty_lo)
            ty_hi = np.where(par_y, np.where(in_y, np.inf, -np.inf), ty_hi)
            t_near = np.maximum(tx_lo, ty_lo)
            t_far = np.minimum(tx_hi, ty_hi)
            ok = (t_near <= t_far) & (t_near > 0)
            best = np.where(ok & (t_near < best), t_near, best)
    return best


def simulate_lidar(scene: VectorScene, pose=(0.0, 0.0), params: LidarParams = LidarParams()) -> PointCloud:
    """Planar ray casting with synthesized heights.

    Each ray stops at the first building (a return on the wall, at a random
    height up to 2 m) or at ``max_range`` (a ground return).  With
    ``ground_step > 0`` every ray also returns ground points at that spacing
    before it stops; their height and reflectivity follow the surface class.
    Feature per point: reflectivity.
    """
    rng = np.random.default_rng([int(scene.seed), int(params.seed)])
    ang = 2 * np.pi * np.arange(params.n_rays) / params.n_rays
    dirs = np.stack([np.cos(ang), np.sin(ang)], -1)
    origin = np.asarray(pose, dtype=np.float64)[:2]
    hit = ray_box_distances(origin, dirs, scene.boxes)
    blocked = hit <= params.max_range
    stop = np.where(blocked, hit, params.max_range)

    xy_end = origin + dirs * stop[:, None]
    z_end = np.zeros(params.n_rays)
    i_end = np.full(params.n_rays, 0.2)
    if (~blocked).any():
        z_end[~blocked], i_end[~blocked] = _surface(scene, xy_end[~blocked])
    z_end[blocked] = rng.uniform(0.3, 2.0, size=int(blocked.sum()))

    parts_xy, parts_z, parts_i = [xy_end], [z_end], [i_end]
    if params.ground_step > 0:
        steps = np.arange(1, int(np.ceil(params.max_range / params.ground_step))) * params.ground_step
        ray_id, step_id = np.nonzero(steps[None, :] < stop[:, None])
        if len(ray_id):
            gxy = origin + dirs[ray_id] * steps[step_id, None]
            gz, gi = _surface(scene, gxy)
            parts_xy.append(gxy)
            parts_z.append(gz)
            parts_i.append(gi)
    xy = np.concatenate(parts_xy)
    z = np.concatenate(parts_z)
    inten = np.concatenate(parts_i)
    if params.noise_sigma > 0:
        z = z + rng.normal(0.0, params.noise_sigma, size=z.shape)
        inten = np.clip(inten + rng.normal(0.0, 0.05, size=inten.shape), 0.0, 1.0)
    return PointCloud(np.column_stack([xy, z]), inten[:, None])


PALETTE = {
    "sky": (0.55, 0.70, 0.95),
    None: (0.35, 0.45, 0.25),
    "drivable": (0.25, 0.25, 0.28),
    "divider": (0.95, 0.95, 0.90),
    "walkway": (0.70, 0.65, 0.60),
    "crossing": (0.90, 0.90, 0.95),
}


def simulate_camera(scene: VectorScene, cam: CameraModel) -> np.ndarray:
    """``(Hi, Wi, 3)`` image: ground-plane class colors below the horizon, sky above."""
    if cam.translation[2] <= 0:
        raise ConfigError("camera must be above the ground plane")
    if cam.rotation[2, 2] >= 0:
        raise ConfigError("optical axis must point below the horizon")
    hi, wi = cam.image_size
    py, px = np.meshgrid(np.arange(hi) + 0.5, np.arange(wi) + 0.5, indexing="ij")
    rays = cam.pixel_rays(px, py)
    down = rays[..., 2] < 0
    img = np.empty((hi, wi, 3))
    img[:] = PALETTE["sky"]
    t = -cam.translation[2] / rays[down][:, 2]
    ground = cam.translation[:2] + rays[down][:, :2] * t[:, None]
    member = classify_points(scene, ground)
    colors = np.empty((len(ground), 3))
    colors[:] = PALETTE[None]
    assigned = np.zeros(len(ground), bool)
    for name in _PRIORITY:
        hit = member[:, CLASSES.index(name)] & ~assigned
        colors[hit] = PALETTE[name]
        assigned |= hit
    img[down] = colors
    return img
