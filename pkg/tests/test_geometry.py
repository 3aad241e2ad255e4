import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rcbf.geometry import (
    PENDING, SAFE, UNSAFE, Cell, CellIndex, Domain, LatticeIndex, Partition, UnionDistance, cell_index,
    cells_from_json, cells_to_json, root_cells, signed_distance_to_union, split_cell, volume,
)

from oracles import DenseSignedDistance, random_tiling


def box_of(cell, domain):
    lo, hi = cell.bounds(domain)
    return lo, hi


class TestSplit:
    def test_1d(self):
        kids = split_cell(Cell([0.0], 1.0, 0))
        assert [k.center[0] for k in kids] == pytest.approx([-2 / 3, 0.0, 2 / 3], abs=1e-15)
        assert all(k.radius == pytest.approx(1 / 3) for k in kids)
        assert all(k.label == PENDING for k in kids)

    def test_2d(self):
        kids = split_cell(Cell([0.0, 0.0], 3.0, 0), next_id=10)
        assert sorted(tuple(k.center) for k in kids) == sorted(itertools.product((-2.0, 0.0, 2.0), repeat=2))
        assert {k.radius for k in kids} == {1.0}
        assert [k.id for k in kids] == list(range(10, 19))

    def test_ladder_3d(self):
        kids = split_cell(Cell([0.0, 0.0, 0.0], 10 / 9, 0))
        assert len(kids) == 27
        assert kids[0].radius == pytest.approx(0.370, abs=1e-3)
        # radius ladder 1.111, 0.370, 0.123, 0.041
        r = 10 / 3
        ladder = []
        for _ in range(4):
            r /= 3
            ladder.append(round(r, 3))
        assert ladder == [1.111, 0.37, 0.123, 0.041]

    def test_scaled_offsets(self):
        d = Domain([0, 0], [2, 2 * np.pi], scale=[1.0, np.pi])
        kids = split_cell(Cell([1.0, np.pi], 1.0, 0), scale=d.scale)
        ys = sorted({k.center[1] for k in kids})
        assert ys == pytest.approx([np.pi / 3, np.pi, 5 * np.pi / 3])

    @given(
        n=st.integers(1, 4),
        r=st.floats(1e-3, 1e3),
        c=st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
    )
    def test_tiling_and_volume(self, n, r, c):
        d = Domain([-1e4] * n, [1e4] * n)
        parent = Cell(c[:n], r, 0)
        kids = split_cell(parent)
        assert len(kids) == 3 ** n
        plo, phi = parent.bounds(d)
        # children's corners sit on the thirds lattice of the parent
        edges = [np.linspace(plo[i], phi[i], 4) for i in range(n)]
        seen = set()
        for k in kids:
            lo, hi = k.bounds(d)
            idx = []
            for i in range(n):
                j = int(np.argmin(np.abs(edges[i] - lo[i])))
                assert abs(edges[i][j] - lo[i]) <= 1e-12 * max(1.0, abs(lo[i]), r)
                assert abs(edges[i][j + 1] - hi[i]) <= 1e-12 * max(1.0, abs(hi[i]), r)
                idx.append(j)
            seen.add(tuple(idx))
        assert len(seen) == 3 ** n
        assert abs(volume(kids, d) - volume([parent], d)) <= 1e-12 * volume([parent], d)


class TestVolume:
    def test_unit(self):
        assert volume([Cell([0.0, 0.0], 1.0, 0)], Domain([-5, -5], [5, 5])) == 4.0

    def test_ladder_cell(self):
        v = volume([Cell([0.0, 0.0, 0.0], 10 / 9, 0)], Domain([-5] * 3, [5] * 3))
        assert v == pytest.approx((2 * 10 / 9) ** 3)
        assert round(v, 2) == 10.97

    def test_clipped(self):
        assert volume([Cell([1.0], 1.0, 0)], Domain([0.0], [1.5])) == pytest.approx(1.5)


class TestDomain:
    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            Domain([1.0], [0.0])
        with pytest.raises(ValueError):
            Domain([0.0, 0.0], [1.0])

    def test_wrap_and_diff(self):
        d = Domain([0.0, 0.0], [1.0, 2 * np.pi], periodic=(False, True))
        assert d.wrap(np.array([0.5, -0.1]))[1] == pytest.approx(2 * np.pi - 0.1)
        assert d.diff(np.array([0.0, 0.1]), np.array([0.0, 2 * np.pi - 0.1]))[1] == pytest.approx(0.2)

    def test_json_roundtrip(self):
        d = Domain([0.0, 0.0], [1.0, 2.0], periodic=(False, True), scale=[1.0, 2.0], boundary_exterior=False)
        e = Domain.from_json(d.to_json())
        assert e.to_json() == d.to_json()

    def test_root_cells_tile(self):
        d = Domain([-10, -10, 0], [10, 10, 2 * np.pi], periodic=(False, False, True), scale=[1, 1, np.pi / 10])
        roots = root_cells(d)
        assert len(roots) == 1 and roots[0].radius == pytest.approx(10.0)
        assert volume(roots, d) == pytest.approx(d.volume())
        with pytest.raises(ValueError):
            root_cells(d, radius=3.0)


class TestSignedDistance:
    def test_center_of_lone_cell(self):
        d = Domain([-3.0, -3.0], [3.0, 3.0])
        part = Partition.from_domain(d)
        kids = part.split(0)
        member = [k for k in kids if np.allclose(k.center, 0)]
        others = [k for k in kids if not np.allclose(k.center, 0)]
        assert signed_distance_to_union(np.zeros(2), member, others, d) == pytest.approx(-1.0)

    def test_outside(self):
        d = Domain([-3.0, -3.0], [3.0, 3.0])
        kids = split_cell(Cell([0.0, 0.0], 3.0, 0))
        member = [k for k in kids if np.allclose(k.center, 0)]
        others = [k for k in kids if k not in member]
        assert signed_distance_to_union(np.array([1.5, 0.2]), member, others, d) == pytest.approx(0.5)

    def test_empty_union(self):
        d = Domain([0.0], [1.0])
        assert signed_distance_to_union(np.array([0.5]), [], [Cell([0.5], 0.5, 0)], d) == np.inf

    def test_shared_face_is_interior(self):
        # two adjacent members: the shared face is not a boundary
        d = Domain([-3.0], [3.0])
        kids = split_cell(Cell([0.0], 3.0, 0))
        member, other = kids[:2], kids[2:]
        assert signed_distance_to_union(np.array([-1.0]), member, other, d) == pytest.approx(-2.0)

    def test_matches_dense_boundary_sampling(self, rng):
        d = Domain([-1.0, -1.0], [1.0, 1.0])
        part = random_tiling(rng, 2, 3)
        safe, unsafe = part.safe, part.unsafe
        boxes = [box_of(c, d) for c in safe]
        # the domain exterior is a non-member: add it as the complement of the box
        sd = UnionDistance(safe, unsafe, d)
        xs = rng.uniform(-1, 1, size=(200, 2))
        ref = DenseSignedDistance(boxes, samples_per_face=400)(xs)
        face = np.minimum((xs - d.lower).min(axis=1), (d.upper - xs).min(axis=1))
        ref = np.where(ref < 0, -np.minimum(-ref, face), ref)
        assert np.allclose(sd(xs), ref, atol=1e-3)

    def test_periodic_wrap(self):
        d = Domain([0.0, 0.0], [3.0, 3.0], periodic=(False, True))
        kids = split_cell(Cell([1.5, 1.5], 1.5, 0))
        member = [k for k in kids if np.allclose(k.center, [1.5, 0.5])]
        others = [k for k in kids if k not in member]
        # across the seam: y = 2.9 is 0.1 from the member's lower face at y = 0 (= 3)
        assert signed_distance_to_union(np.array([1.5, 2.9]), member, others, d) == pytest.approx(0.1)

    def test_neutral_boundary_depth(self):
        d = Domain([-3.0], [3.0], boundary_exterior=False)
        kids = split_cell(Cell([0.0], 3.0, 0))
        member, other = [kids[0]], kids[1:]
        # the exterior joins the union, so only the inner neighbour limits depth
        assert signed_distance_to_union(np.array([-2.9]), member, other, d) == pytest.approx(-1.9)
        closed = Domain([-3.0], [3.0])
        assert signed_distance_to_union(np.array([-2.9]), member, other, closed) == pytest.approx(-0.1)
        assert signed_distance_to_union(np.array([-3.5]), member, other, d) <= 0

    @given(st.integers(0, 10_000))
    def test_sign_law_symmetry_lipschitz(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        part = random_tiling(rng, n, 2)
        safe, unsafe = part.safe, part.unsafe
        if not safe or not unsafe:
            return
        d = part.domain
        f = UnionDistance(safe, unsafe, d)
        g = UnionDistance(unsafe, safe, d)
        x = rng.uniform(-1, 1, size=(64, n))
        y = np.clip(x + rng.uniform(-0.3, 0.3, size=x.shape), -1, 1)
        fx, fy, gx = f(x), f(y), g(x)
        assert np.all(np.abs(fx - fy) <= d.dist(x, y) + 1e-12)
        in_safe = cell_index(safe, d).gap(x) <= 0
        in_unsafe = cell_index(unsafe, d).gap(x) <= 0
        strict = in_safe & ~in_unsafe
        assert np.all(fx[strict] < 0) or not strict.any()
        assert np.all(fx[~in_safe] > 0)
        # away from the domain faces, swapping the lists negates the value
        deep = d.face_distance(x) > np.abs(fx) + 1e-9
        both = deep & strict
        assert np.allclose(gx[both], -fx[both])


class TestIndexes:
    @given(st.integers(0, 10_000))
    def test_lattice_matches_kd(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        per = tuple(bool(b) for b in rng.integers(0, 2, size=n))
        d = Domain([-1.0] * n, [1.0] * n, periodic=per)
        part = Partition.from_domain(d)
        for _ in range(3):
            for c in list(part.cells.values()):
                if rng.random() < 0.4:
                    part.split(c.id)
        cells = [c for c in part.cells.values() if rng.random() < 0.3]
        if not cells:
            return
        lat, kd = LatticeIndex(cells, d), CellIndex(cells, d)
        x = rng.uniform(-1.5, 1.5, size=(200, n))
        a, b = lat.gap(x), np.maximum(kd.gap(x), 0.0)
        assert np.allclose(a, b, atol=1e-12, rtol=0)

    def test_lattice_rejects_misaligned(self):
        d = Domain([0.0], [1.0])
        with pytest.raises(ValueError):
            LatticeIndex([Cell([0.35], 0.1, 0)], d)
        assert isinstance(cell_index([Cell([0.35], 0.1, 0)], d), CellIndex)


class TestPartition:
    def test_json_roundtrip(self, rng):
        part = random_tiling(rng, 2, 2)
        again = Partition.from_json(part.domain, part.to_json())
        assert again.to_json() == part.to_json()
        assert cells_to_json(cells_from_json(cells_to_json(part.cells.values()))) == cells_to_json(part.cells.values())
        assert again.next_id == max(part.cells) + 1

    def test_tiling_check(self, rng):
        part = random_tiling(rng, 3, 2)
        assert part.check_tiling()
        assert part.volume(SAFE) + part.volume(UNSAFE) == pytest.approx(part.domain.volume())

    def test_locate(self):
        d = Domain([-1.0], [1.0])
        part = Partition.from_domain(d)
        kids = part.split(0)
        part.relabel(kids[1].id, UNSAFE)
        for k in (kids[0], kids[2]):
            part.relabel(k.id, SAFE)
        got = part.locate(np.array([[0.0], [1 / 3], [0.5], [-0.9]]), UNSAFE)
        assert got.tolist() == [True, True, False, False]
