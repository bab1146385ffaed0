import itertools

import pytest
from hypothesis import given, settings, strategies as st

from bevlab.bevgrid import (BevScope, ConfigError, Kernel2, OutOfScopeError, PixelCoord, Rect,
                            ScopeBoundsError, downscale_scope, iter_pixels, pixel_coverage,
                            pooled_coverage, world_to_pixel)

from oracles import brute_union

HUNDRED = BevScope.square(-50.0, 50.0, 0.5)
EIGHT = BevScope.square(0.0, 8.0, 2.0)


def test_scope_dims():
    assert HUNDRED.shape == (200, 200)
    assert BevScope(0, 6, 0, 4, 2.0, 1.0).shape == (4, 3)


@pytest.mark.parametrize("args", [(0, 0, 0, 1, 1, 1), (0, 1, 0, 1, 0, 1), (0, 1, 0, 1, 0.3, 1),
                                  (1, 0, 0, 1, 1, 1)])
def test_invalid_scope(args):
    with pytest.raises(ConfigError):
        BevScope(*args)


def test_scope_dict_roundtrip():
    assert BevScope.from_dict(HUNDRED.to_dict()) == HUNDRED


class TestPixelCoverage:
    def test_origin(self):
        assert pixel_coverage(PixelCoord(0, 0), HUNDRED) == Rect(-50, -49.5, -50, -49.5)

    def test_last_column(self):
        assert pixel_coverage(PixelCoord(199, 0), HUNDRED) == Rect(49.5, 50.0, -50, -49.5)

    def test_affine(self):
        assert pixel_coverage(PixelCoord(3, 2), EIGHT) == Rect(6, 8, 4, 6)

    def test_bounds(self):
        with pytest.raises(ScopeBoundsError):
            pixel_coverage(PixelCoord(4, 0), EIGHT)
        with pytest.raises(ScopeBoundsError):
            pixel_coverage(PixelCoord(0, -1), EIGHT)


class TestWorldToPixel:
    def test_examples(self):
        assert world_to_pixel(-50, -50, HUNDRED) == PixelCoord(0, 0)
        assert world_to_pixel(-49.5, -50, HUNDRED) == PixelCoord(1, 0)
        assert world_to_pixel(7.9, 5.9, EIGHT) == PixelCoord(3, 2)

    def test_out_of_scope(self):
        with pytest.raises(OutOfScopeError):
            world_to_pixel(8.0, 1.0, EIGHT)
        with pytest.raises(OutOfScopeError):
            world_to_pixel(-0.01, 1.0, EIGHT)

    def test_round_trip_all_pixels(self):
        for scope in (EIGHT, BevScope(-3, 5, -2, 2, 0.5, 0.25), BevScope.square(-16, 16, 0.5)):
            for u in iter_pixels(scope):
                assert world_to_pixel(*pixel_coverage(u, scope).center, scope) == u


def test_partition_tiles_window():
    for scope in (EIGHT, BevScope(-3, 5, -2, 2, 0.5, 0.25), BevScope.square(-4, 4, 0.25)):
        rects = [pixel_coverage(u, scope) for u in iter_pixels(scope)]
        window = (scope.ub_x - scope.lb_x) * (scope.ub_y - scope.lb_y)
        assert sum(r.area for r in rects) == pytest.approx(window, rel=1e-12)
        assert len(rects) <= 32 * 32
        for a, b in itertools.combinations(rects, 2):
            overlap_x = min(a.max_x, b.max_x) - max(a.min_x, b.min_x)
            overlap_y = min(a.max_y, b.max_y) - max(a.min_y, b.min_y)
            assert overlap_x <= 0 or overlap_y <= 0


class TestPooledCoverage:
    def test_two_by_two(self):
        rect, r = pooled_coverage(PixelCoord(0, 0), HUNDRED, Kernel2(2, 2))
        assert r == (1.0, 1.0)
        assert rect == Rect(-50, -49, -50, -49)

    def test_identity_kernel(self):
        for u in iter_pixels(EIGHT):
            rect, r = pooled_coverage(u, EIGHT, Kernel2(1, 1))
            assert rect == pixel_coverage(u, EIGHT)
            assert r == (EIGHT.r_x, EIGHT.r_y)

    def test_anisotropic(self):
        rect, r = pooled_coverage(PixelCoord(1, 0), EIGHT, Kernel2(2, 1))
        assert r == (4.0, 2.0)
        assert rect == Rect(4, 8, 0, 2)

    def test_non_divisible(self):
        with pytest.raises(ConfigError):
            pooled_coverage(PixelCoord(0, 0), BevScope.square(0, 6, 2.0), Kernel2(2, 2))

    def test_matches_brute_force_union(self):
        for n in (4, 8, 12, 16):
            scope = BevScope.square(-n / 2, n / 2, 1.0)
            for ku, kv in itertools.product(range(1, 5), repeat=2):
                if n % ku or n % kv:
                    continue
                k = Kernel2(ku, kv)
                for pu in range(n // ku):
                    for pv in range(n // kv):
                        u = PixelCoord(pu, pv)
                        rect, _ = pooled_coverage(u, scope, k)
                        assert rect == brute_union(u, scope, k)


class TestDownscale:
    def test_reference_scales(self):
        assert downscale_scope(HUNDRED, 4) == BevScope.square(-50, 50, 2.0)
        assert downscale_scope(HUNDRED, 8) == BevScope.square(-50, 50, 4.0)
        assert downscale_scope(HUNDRED, 1) == HUNDRED

    def test_non_divisible(self):
        with pytest.raises(ConfigError):
            downscale_scope(HUNDRED, 3)

    @settings(max_examples=50, deadline=None)
    @given(a=st.sampled_from([1, 2, 4]), b=st.sampled_from([1, 2, 4]),
           cells=st.sampled_from([16, 32, 64]), r=st.sampled_from([0.25, 0.5, 1.0]))
    def test_composition(self, a, b, cells, r):
        scope = BevScope.square(-cells * r / 2, cells * r / 2, r)
        assert downscale_scope(scope, a * b) == downscale_scope(downscale_scope(scope, a), b)
