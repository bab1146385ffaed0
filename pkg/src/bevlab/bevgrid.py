"""BEV scope and resolution algebra.

A :class:`BevScope` is an axis-aligned window ``[lb, ub)`` on each axis with a
resolution in meters per pixel.  Pixel ``u`` indexes columns (X) and ``v``
indexes rows (Y); cells are half-open so a point on a shared boundary belongs
to exactly one pixel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


class ConfigError(ValueError):
    """Invalid scope, kernel or scale configuration."""


class ScopeBoundsError(IndexError):
    """Pixel index outside the grid."""


class OutOfScopeError(ValueError):
    """World point outside the scope window."""


def _exact_cells(lb: float, ub: float, r: float) -> int:
    n = (ub - lb) / r
    k = round(n)
    if k < 1 or abs(n - k) > 1e-9 * max(1.0, abs(n)):
        raise ConfigError(f"extent {ub - lb} is not a whole number of {r} m cells")
    return int(k)


@dataclass(frozen=True)
class BevScope:
    lb_x: float
    ub_x: float
    lb_y: float
    ub_y: float
    r_x: float
    r_y: float

    def __post_init__(self):
        if not (self.ub_x > self.lb_x and self.ub_y > self.lb_y):
            raise ConfigError("scope needs ub > lb on both axes")
        if not (self.r_x > 0 and self.r_y > 0):
            raise ConfigError("resolution must be positive")
        _exact_cells(self.lb_x, self.ub_x, self.r_x)
        _exact_cells(self.lb_y, self.ub_y, self.r_y)

    @classmethod
    def square(cls, lb: float, ub: float, r: float) -> "BevScope":
        return cls(lb, ub, lb, ub, r, r)

    @property
    def w(self) -> int:
        """Number of columns."""
        return _exact_cells(self.lb_x, self.ub_x, self.r_x)

    @property
    def d(self) -> int:
        """Number of rows."""
        return _exact_cells(self.lb_y, self.ub_y, self.r_y)

    @property
    def shape(self) -> tuple[int, int]:
        return self.d, self.w

    def to_dict(self) -> dict:
        return {"lb_x": self.lb_x, "ub_x": self.ub_x, "lb_y": self.lb_y,
                "ub_y": self.ub_y, "r_x": self.r_x, "r_y": self.r_y}

    @classmethod
    def from_dict(cls, d: dict) -> "BevScope":
        return cls(float(d["lb_x"]), float(d["ub_x"]), float(d["lb_y"]),
                   float(d["ub_y"]), float(d["r_x"]), float(d["r_y"]))


@dataclass(frozen=True)
class PixelCoord:
    u: int
    v: int


@dataclass(frozen=True)
class Kernel2:
    size_u: int
    size_v: int

    def __post_init__(self):
        if self.size_u < 1 or self.size_v < 1:
            raise ConfigError("kernel sizes must be positive")

    @property
    def offsets(self) -> list[tuple[int, int]]:
        # anchored at the top-left member, matching stride-k pooling
        return [(i, j) for i in range(self.size_u) for j in range(self.size_v)]


@dataclass(frozen=True)
class Rect:
    min_x: float
    max_x: float
    min_y: float
    max_y: float

    @property
    def area(self) -> float:
        return (self.max_x - self.min_x) * (self.max_y - self.min_y)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y)

    def contains(self, x: float, y: float) -> bool:
        return self.min_x <= x < self.max_x and self.min_y <= y < self.max_y


def pixel_coverage(u: PixelCoord, scope: BevScope) -> Rect:
    """Half-open world rectangle covered by pixel ``u``."""
    if not (0 <= u.u < scope.w and 0 <= u.v < scope.d):
        raise ScopeBoundsError(f"pixel {u} outside {scope.d}x{scope.w} grid")
    return Rect(scope.lb_x + u.u * scope.r_x, scope.lb_x + (u.u + 1) * scope.r_x,
                scope.lb_y + u.v * scope.r_y, scope.lb_y + (u.v + 1) * scope.r_y)


def world_to_pixel(x: float, y: float, scope: BevScope) -> PixelCoord:
    if not (scope.lb_x <= x < scope.ub_x and scope.lb_y <= y < scope.ub_y):
        raise OutOfScopeError(f"point ({x}, {y}) outside scope")
    u = int(math.floor((x - scope.lb_x) / scope.r_x))
    v = int(math.floor((y - scope.lb_y) / scope.r_y))
    # floor can round up to w at the very top of the window
    return PixelCoord(min(u, scope.w - 1), min(v, scope.d - 1))


def pooled_coverage(u: PixelCoord, scope: BevScope, k: Kernel2) -> tuple[Rect, tuple[float, float]]:
    """Coverage of pooled pixel ``u`` and the pooled resolution.

    The pooled resolution is ``(r_x * size_u, r_y * size_v)``; the rectangle
    is the union of the member cells ``u * size + offset`` of the original grid.
    """
    if scope.w % k.size_u or scope.d % k.size_v:
        raise ConfigError(f"grid {scope.d}x{scope.w} not divisible by kernel {k.size_v}x{k.size_u}")
    new_r = (scope.r_x * k.size_u, scope.r_y * k.size_v)
    pw, pd = scope.w // k.size_u, scope.d // k.size_v
    if not (0 <= u.u < pw and 0 <= u.v < pd):
        raise ScopeBoundsError(f"pooled pixel {u} outside {pd}x{pw} grid")
    base_u, base_v = u.u * k.size_u, u.v * k.size_v
    first = pixel_coverage(PixelCoord(base_u, base_v), scope)
    last = pixel_coverage(PixelCoord(base_u + k.size_u - 1, base_v + k.size_v - 1), scope)
    return Rect(first.min_x, last.max_x, first.min_y, last.max_y), new_r


def downscale_scope(scope: BevScope, s: int) -> BevScope:
    """Same window at ``s`` times coarser resolution."""
    if int(s) != s or s < 1:
        raise ConfigError(f"scale factor must be a positive integer, got {s}")
    if scope.w % s or scope.d % s:
        raise ConfigError(f"grid {scope.d}x{scope.w} not divisible by {s}")
    return BevScope(scope.lb_x, scope.ub_x, scope.lb_y, scope.ub_y, scope.r_x * s, scope.r_y * s)


def pixel_centers(scope: BevScope) -> tuple[np.ndarray, np.ndarray]:
    """Cell-center X (length w) and Y (length d) coordinates."""
    xs = scope.lb_x + (np.arange(scope.w) + 0.5) * scope.r_x
    ys = scope.lb_y + (np.arange(scope.d) + 0.5) * scope.r_y
    return xs, ys


def points_to_pixels(xy, scope: BevScope):
    """Vectorized world_to_pixel.

    Returns integer ``(u, v)`` arrays and a boolean in-scope mask; indices of
    out-of-scope points are undefined and must be filtered by the caller.
    """
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[..., 0], xy[..., 1]
    inside = (x >= scope.lb_x) & (x < scope.ub_x) & (y >= scope.lb_y) & (y < scope.ub_y)
    u = np.floor((x - scope.lb_x) / scope.r_x).astype(np.int64)
    v = np.floor((y - scope.lb_y) / scope.r_y).astype(np.int64)
    np.clip(u, 0, scope.w - 1, out=u)
    np.clip(v, 0, scope.d - 1, out=v)
    return u, v, inside


def iter_pixels(scope: BevScope) -> Iterable[PixelCoord]:
    for v in range(scope.d):
        for u in range(scope.w):
            yield PixelCoord(u, v)
