import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rcbf.dynamics import dubins3d, dubins_domain, single_integrator
from rcbf.geometry import SAFE, UNSAFE, Domain, Partition
from rcbf.oracle import (
    brute_force_brt, containment_fraction, from_bytes, grid_axes, interpolation_matrix, node_weights, to_bytes,
    volume_gap,
)
from rcbf.sets import Box, Cylinder, Empty

LINE = Domain([-1.0], [1.0])
STRIP = Box((-0.2,), (0.2,))


def line_oracle(n=81, tau=1.0, **kw):
    return brute_force_brt(single_integrator(1, LINE), STRIP, LINE, tau, n, **kw)


@pytest.fixture(scope="module")
def dubins45():
    d = dubins_domain()
    return brute_force_brt(dubins3d(domain=d), Cylinder((0, 1), (0, 0), 1.0), d, 0.5, 45, dt=0.05)


class TestGrid:
    def test_weights_sum_to_volume(self):
        d = dubins_domain()
        assert node_weights(d, (7, 9, 12)).sum() == pytest.approx(d.volume(), rel=1e-12)

    def test_periodic_axis_skips_endpoint(self):
        ax = grid_axes(dubins_domain(), (3, 3, 4))[2]
        assert np.allclose(ax, [0, np.pi / 2, np.pi, 3 * np.pi / 2])

    @given(st.floats(-1, 1), st.floats(-3, 3))
    def test_interpolation_reproduces_affine(self, x, slope):
        n = 11
        W, esc = interpolation_matrix(LINE, (n,), np.array([[x]]))
        vals = slope * grid_axes(LINE, (n,))[0] + 0.5
        assert not esc[0]
        assert (W @ vals)[0] == pytest.approx(slope * x + 0.5, abs=1e-12)

    def test_escape_flag_outside(self):
        _, esc = interpolation_matrix(LINE, (5,), np.array([[1.5], [0.0]]))
        assert esc.tolist() == [True, False]


class TestBrute:
    def test_integrator_tube_is_the_strip(self):
        # with |u| <= 1 every outside state can back away, so the tube is the strip itself
        for n in (41, 81, 161):
            o = line_oracle(n)
            h = 2.0 / (n - 1)
            b = o.brt_nodes()[:, 0]
            assert b.min() >= -0.2 - h and b.max() <= 0.2 + h
            assert b.min() <= -0.2 + h and b.max() >= 0.2 - h

    def test_refinement_moves_boundary_by_one_coarse_spacing(self):
        for n in (41, 81):
            coarse, fine = line_oracle(n).brt_nodes()[:, 0], line_oracle(2 * n - 1).brt_nodes()[:, 0]
            h = 2.0 / (n - 1)
            assert abs(fine.min() - coarse.min()) <= h and abs(fine.max() - coarse.max()) <= h

    def test_zero_horizon_is_level_set(self):
        o = line_oracle(41, tau=0.0)
        l = STRIP.signed_distance(o.nodes, LINE)
        assert np.array_equal(o.brt_mask.ravel(), l <= 0)

    def test_empty_unsafe_set(self):
        o = brute_force_brt(single_integrator(1, LINE), Empty(), LINE, 0.5, 21)
        assert o.brt_volume() == 0.0

    def test_argument_checks(self):
        f = single_integrator(1, LINE)
        with pytest.raises(ValueError):
            brute_force_brt(f, STRIP, LINE, 1.0, 21, dt=0.3)
        with pytest.raises(ValueError):
            brute_force_brt(f, STRIP, LINE, 1.0, 21, scheme="midpoint")
        with pytest.raises(ValueError):
            brute_force_brt(f, STRIP, LINE, 1.0, 21, n_controls=0)

    def test_euler_scheme_on_integrator(self):
        # RK4 and Euler coincide for constant rates
        a, b = line_oracle(41), line_oracle(41, scheme="euler")
        assert np.allclose(a.values, b.values)
        assert b.meta["scheme"] == "euler"

    def test_monotone_in_horizon(self):
        d = dubins_domain()
        f, U = dubins3d(domain=d), Cylinder((0, 1), (0, 0), 1.0)
        masks = [brute_force_brt(f, U, d, t, 25, dt=0.05).brt_mask for t in (0.0, 0.25, 0.5)]
        for short, long in zip(masks, masks[1:]):
            assert np.all(long[short])
            assert long.sum() > short.sum()

    def test_dubins_snapshot(self, dubins45):
        # frozen from a 45^3 run at dt=0.05, tau=0.5
        assert int(dubins45.brt_mask.sum()) == 1431
        assert dubins45.brt_volume() == pytest.approx(41.28208528270885, rel=1e-9)
        U = Cylinder((0, 1), (0, 0), 1.0)
        inside = U.signed_distance(dubins45.nodes, dubins45.domain) <= 0
        assert np.all(dubins45.brt_mask.ravel()[inside])

    def test_dubins_refinement_stable(self, dubins45):
        d = dubins45.domain
        fine = brute_force_brt(dubins3d(domain=d), Cylinder((0, 1), (0, 0), 1.0), d, 0.5, 61, dt=0.05)
        assert fine.brt_volume() == pytest.approx(dubins45.brt_volume(), rel=0.15)


class TestSerialization:
    def test_round_trip(self, dubins45):
        back = from_bytes(to_bytes(dubins45), dubins45.to_json())
        assert np.array_equal(back.values, dubins45.values)
        assert np.array_equal(back.counts, dubins45.counts)
        assert back.tau == dubins45.tau and back.meta == dubins45.meta

    def test_rejects_mismatch(self):
        o = line_oracle(21)
        raw, side = to_bytes(o), o.to_json()
        with pytest.raises(ValueError):
            from_bytes(raw[:-8], side)
        other = dict(side, domain=Domain([-2.0], [1.0]).to_json())
        with pytest.raises(ValueError):
            from_bytes(raw, other)


class TestMetrics:
    def test_all_unsafe_contains(self):
        o = line_oracle(41)
        part = Partition.from_domain(LINE)
        part.relabel(0, UNSAFE)
        assert containment_fraction(part, o) == 1.0
        assert volume_gap(part, o) == pytest.approx((2.0 - 0.4) / 0.4)

    def test_all_safe_misses(self):
        o = line_oracle(41)
        part = Partition.from_domain(LINE)
        part.relabel(0, SAFE)
        assert containment_fraction(part, o) == 0.0

    def test_exact_strip_partition(self):
        # five cells of width 0.4; the middle one is exactly the strip
        part = Partition.from_domain(LINE, root_radius=0.2)
        for c in part.cells.values():
            part.relabel(c.id, UNSAFE if abs(c.center[0]) < 0.2 else SAFE)
        o = line_oracle(41)
        assert containment_fraction(part, o) == 1.0
        assert volume_gap(part, o) == pytest.approx(0.0, abs=1e-12)

    def test_empty_tube(self):
        o = brute_force_brt(single_integrator(1, LINE), Empty(), LINE, 0.5, 21)
        part = Partition.from_domain(LINE)
        assert math.isnan(containment_fraction(part, o))
        with pytest.raises(ValueError):
            volume_gap(part, o)
