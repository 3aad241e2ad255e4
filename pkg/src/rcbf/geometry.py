"""Cells, partitions and exact signed distances to unions of cells.

All distances use a scaled infinity norm ``||d|| = max_i |d_i| / scale_i``.
With unit scales this is the plain infinity norm; non-unit scales let a
single cubic cell cover a domain whose sides have different lengths (for
instance a periodic angle next to two position coordinates).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _lattice

PENDING = "pending"
SAFE = "safe"
UNSAFE = "unsafe"
LABELS = (PENDING, SAFE, UNSAFE)


@dataclass(frozen=True)
class Domain:
    lower: np.ndarray
    upper: np.ndarray
    periodic: tuple = ()
    scale: np.ndarray | None = None
    # domain faces count as non-member boundary when measuring inside depth
    boundary_exterior: bool = True

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        n = lower.size
        periodic = tuple(bool(p) for p in self.periodic) or (False,) * n
        scale = np.ones(n) if self.scale is None else np.atleast_1d(np.asarray(self.scale, dtype=float))
        if n < 1 or upper.size != n or len(periodic) != n or scale.size != n:
            raise ValueError("domain bounds, periodic flags and scales must share one dimension")
        if not np.all(lower < upper):
            raise ValueError("domain requires lower < upper componentwise")
        if not np.all(np.isfinite(lower) & np.isfinite(upper)):
            raise ValueError("domain bounds must be finite")
        if not np.all(scale > 0):
            raise ValueError("metric scales must be positive")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "periodic", periodic)
        object.__setattr__(self, "scale", scale)

    @property
    def ndim(self) -> int:
        return self.lower.size

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def periodic_mask(self) -> np.ndarray:
        return np.array(self.periodic, dtype=bool)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Map periodic coordinates into ``[lower, upper)``."""
        x = np.array(x, dtype=float, copy=True)
        pm = self.periodic_mask
        if pm.any():
            lo, ext = self.lower[pm], self.extent[pm]
            x[..., pm] = lo + np.mod(x[..., pm] - lo, ext)
        return x

    def diff(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``x - y`` with periodic components reduced to the shortest representative."""
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        pm = self.periodic_mask
        if pm.any():
            ext = self.extent[pm]
            d[..., pm] = d[..., pm] - ext * np.round(d[..., pm] / ext)
        return d

    def norm(self, d: np.ndarray) -> np.ndarray:
        return np.max(np.abs(d) / self.scale, axis=-1)

    def dist(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.norm(self.diff(x, y))

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        free = ~self.periodic_mask
        return np.all((x[..., free] >= self.lower[free]) & (x[..., free] <= self.upper[free]), axis=-1)

    def face_distance(self, x: np.ndarray) -> np.ndarray:
        """Scaled distance to the nearest non-periodic domain face (inf if none)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        free = ~self.periodic_mask
        if not free.any():
            return np.full(x.shape[0], np.inf)
        lo = (x[:, free] - self.lower[free]) / self.scale[free]
        hi = (self.upper[free] - x[:, free]) / self.scale[free]
        return np.minimum(lo, hi).min(axis=1)

    def volume(self) -> float:
        return float(np.prod(self.extent))

    def to_json(self) -> dict:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "periodic": list(self.periodic),
            "scale": self.scale.tolist(),
            "boundary": "exterior" if self.boundary_exterior else "neutral",
        }

    @classmethod
    def from_json(cls, d: dict) -> "Domain":
        boundary = d.get("boundary", "exterior")
        if boundary not in ("exterior", "neutral"):
            raise ValueError(f"unknown boundary policy {boundary!r}")
        return cls(
            lower=d["lower"],
            upper=d["upper"],
            periodic=tuple(d.get("periodic") or ()),
            scale=d.get("scale"),
            boundary_exterior=boundary == "exterior",
        )


@dataclass(eq=False)
class Cell:
    center: np.ndarray
    radius: float
    id: int
    label: str = PENDING
    level: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.radius = float(self.radius)
        if not self.radius > 0:
            raise ValueError("cell radius must be positive")

    def half_widths(self, domain: Domain) -> np.ndarray:
        return self.radius * domain.scale

    def bounds(self, domain: Domain) -> tuple[np.ndarray, np.ndarray]:
        h = self.half_widths(domain)
        return self.center - h, self.center + h

    def contains(self, x: np.ndarray, domain: Domain) -> np.ndarray:
        return domain.dist(x, self.center) <= self.radius

    def to_json(self) -> dict:
        return {"id": self.id, "center": self.center.tolist(), "radius": self.radius, "label": self.label}


def split_cell(cell: Cell, next_id: int = 0, scale=None) -> list[Cell]:
    """Split a cell into its ``3**n`` thirds.

    Children get consecutive ids starting at ``next_id``, in lexicographic
    order of the offset vector ``delta in {-1, 0, 1}**n``. ``scale`` is the
    domain's per-axis metric scale (radii are in scaled units).
    """
    n = cell.center.size
    r = cell.radius
    w = np.ones(n) if scale is None else np.asarray(scale, dtype=float)
    offsets = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=n)))
    centers = cell.center + (2.0 * r / 3.0) * offsets * w
    return [
        Cell(center=c, radius=r / 3.0, id=next_id + i, label=PENDING, level=cell.level + 1)
        for i, c in enumerate(centers)
    ]


def root_cells(domain: Domain, radius: float | None = None, first_id: int = 0) -> list[Cell]:
    """Tile the domain with equal cubic cells of the given scaled radius.

    The default radius is the largest one that tiles the domain exactly.
    """
    scaled = domain.extent / domain.scale
    if radius is None:
        radius = float(scaled.min()) / 2.0
    counts_f = scaled / (2.0 * radius)
    counts = np.rint(counts_f).astype(int)
    if np.any(counts < 1) or not np.allclose(counts, counts_f, rtol=1e-9, atol=1e-9):
        raise ValueError(
            f"root radius {radius} does not tile the domain (scaled extent {scaled.tolist()})"
        )
    h = radius * domain.scale
    axes = [domain.lower[i] + h[i] * (2 * np.arange(counts[i]) + 1) for i in range(domain.ndim)]
    centers = np.array(list(itertools.product(*axes)))
    return [Cell(center=c, radius=radius, id=first_id + i) for i, c in enumerate(centers)]


def volume(cells: Iterable[Cell], domain: Domain) -> float:
    """Total volume of the cells in state units, clipped to the domain box."""
    total = 0.0
    free = ~domain.periodic_mask
    for c in cells:
        width = 2.0 * c.half_widths(domain)
        lo, hi = c.bounds(domain)
        # widths from the radius stay exact far from the origin; clip only at faces
        cross = free & ((lo < domain.lower) | (hi > domain.upper))
        if cross.any():
            width[cross] = np.minimum(hi[cross], domain.upper[cross]) - np.maximum(lo[cross], domain.lower[cross])
        total += float(np.prod(np.clip(width, 0.0, None)))
    return total


class CellIndex:
    """Nearest-cell queries in the scaled infinity norm.

    For a cubic cell, the distance from ``p`` to the cell is
    ``max(||p - c|| - r, 0)``; grouping cells by radius turns the nearest-cell
    problem into one nearest-center query per radius level. Periodic
    dimensions are handled by adding shifted copies of every center.
    """

    def __init__(self, cells: Sequence[Cell], domain: Domain):
        self.domain = domain
        self.size = len(cells)
        groups: dict[float, list[np.ndarray]] = {}
        for c in cells:
            groups.setdefault(c.radius, []).append(c.center)
        pm = domain.periodic_mask
        shifts = [np.zeros(domain.ndim)]
        if pm.any():
            per = np.where(pm, domain.extent, 0.0)
            opts = [(-1, 0, 1) if p else (0,) for p in pm]
            shifts = [np.array(s) * per for s in itertools.product(*opts)]
        self._levels = []
        for r, centers in sorted(groups.items()):
            pts = np.array(centers)
            pts = np.concatenate([pts + s for s in shifts]) / domain.scale
            self._levels.append((r, cKDTree(pts)))

    def gap(self, points: np.ndarray) -> np.ndarray:
        """``min_c (||p - c|| - r_c)``: the distance to the union when positive,
        non-positive iff ``p`` lies in some (closed) cell."""
        pts = np.atleast_2d(points)
        out = np.full(pts.shape[0], np.inf)
        if not self._levels or pts.shape[0] == 0:
            return out
        q = self.domain.wrap(pts) / self.domain.scale
        for r, tree in self._levels:
            d, _ = tree.query(q, k=1, p=np.inf)
            np.minimum(out, d - r, out=out)
        return out


class LatticeIndex:
    """Exact nearest-cell gaps for cells aligned with one voxel lattice.

    The lattice spacing is the smallest cell diameter; every cell must cover a
    whole block of voxels. ``gap`` returns 0 for points in a closed cell
    (the KD variant returns a negative value there) and the exact distance
    to the union elsewhere.
    """

    MAX_VOXELS = 30_000_000

    def __init__(self, cells: Sequence[Cell], domain: Domain):
        self.domain = domain
        self.size = len(cells)
        radius = min(c.radius for c in cells)
        self.voxel = 2.0 * radius  # scaled units
        span = domain.extent / domain.scale / self.voxel
        counts = np.rint(span).astype(np.int64)
        if np.any(np.abs(span - counts) > 1e-6) or np.any(counts < 1):
            raise ValueError("domain does not tile at the finest cell size")
        if np.prod(counts.astype(float)) * 3 ** domain.periodic_mask.sum() > self.MAX_VOXELS:
            raise ValueError("lattice too large")
        occ = np.zeros(tuple(counts), dtype=np.int8)
        for c in cells:
            a = ((c.center - domain.lower) / domain.scale - c.radius) / self.voxel
            w = 2.0 * c.radius / self.voxel
            ai, wi = np.rint(a), np.rint(w)
            if np.any(np.abs(a - ai) > 1e-6) or abs(w - wi) > 1e-6:
                raise ValueError("cell is not lattice aligned")
            ai = ai.astype(np.int64)
            if np.any(ai < 0) or np.any(ai + int(wi) > counts):
                raise ValueError("cell leaves the domain")
            occ[tuple(slice(i, i + int(wi)) for i in ai)] = 1
        self.counts = counts
        self.per = domain.periodic_mask.copy()
        self.sat, self.shape, self.strides = _lattice.build_table(occ, self.per)

    def gap(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(pts.shape[0], np.inf)
        if self.size == 0 or pts.shape[0] == 0:
            return out
        d = self.domain
        q = (d.wrap(pts) - d.lower) / d.scale / self.voxel
        q[:, self.per] += self.counts[self.per]
        excess = np.maximum(np.maximum(-q, q - self.counts), 0.0)
        excess[:, self.per] = 0.0
        rmax = float(self.counts.max() + excess.max() + 2.0)
        g = _lattice.gap_batch(np.ascontiguousarray(q), self.sat, self.shape, self.strides, self.counts, self.per, rmax)
        return g * self.voxel


def cell_index(cells: Sequence[Cell], domain: Domain):
    """Lattice index when the cells allow it, KD-tree index otherwise."""
    if cells:
        try:
            return LatticeIndex(cells, domain)
        except ValueError:
            pass
    return CellIndex(cells, domain)


class UnionDistance:
    """Exact signed distance to the union of ``cells``.

    ``complement`` must hold the remaining cells of the tiling. With
    ``exterior_member`` false, everything beyond the non-periodic domain faces
    is a non-member, so inside depth is also capped by the face distance. With
    it true, the exterior joins the union (open world): it bounds the outside
    distance and does not limit depth. The default follows the domain's
    boundary policy.
    """

    def __init__(
        self,
        cells: Sequence[Cell],
        complement: Sequence[Cell],
        domain: Domain,
        exterior_member: bool | None = None,
    ):
        self.domain = domain
        self.members = cell_index(cells, domain)
        self.others = cell_index(complement, domain)
        self.exterior_member = (not domain.boundary_exterior) if exterior_member is None else bool(exterior_member)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = self.members.gap(pts)
        face = self.domain.face_distance(pts)
        if self.exterior_member:
            # closed exterior: a point on a face is a member
            out = np.where(face <= 0.0, np.minimum(out, 0.0), np.minimum(out, face))
        inside = out <= 0.0
        if inside.any():
            p_in = pts[inside]
            depth = np.maximum(self.others.gap(p_in), 0.0)
            if not self.exterior_member:
                depth = np.minimum(depth, np.maximum(face[inside], 0.0))
            out[inside] = -depth
        return out


def signed_distance_to_union(
    x: np.ndarray, cells: Sequence[Cell], complement_cells: Sequence[Cell], domain: Domain
) -> np.ndarray | float:
    """Signed distance from ``x`` (one point or an array of points) to the union of
    ``cells``. Returns ``+inf`` when ``cells`` is empty."""
    x = np.asarray(x, dtype=float)
    res = UnionDistance(cells, complement_cells, domain)(x)
    return float(res[0]) if x.ndim == 1 else res


@dataclass
class Partition:
    """A tiling of the domain by labeled cells."""

    domain: Domain
    cells: dict = field(default_factory=dict)
    next_id: int = 0

    @classmethod
    def from_domain(cls, domain: Domain, root_radius: float | None = None) -> "Partition":
        roots = root_cells(domain, root_radius)
        part = cls(domain=domain)
        for c in roots:
            part.cells[c.id] = c
        part.next_id = len(roots)
        return part

    def by_label(self, label: str) -> list[Cell]:
        return [c for _, c in sorted(self.cells.items()) if c.label == label]

    @property
    def pending(self) -> list[Cell]:
        return self.by_label(PENDING)

    @property
    def safe(self) -> list[Cell]:
        return self.by_label(SAFE)

    @property
    def unsafe(self) -> list[Cell]:
        return self.by_label(UNSAFE)

    def relabel(self, cell_id: int, label: str) -> None:
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        self.cells[cell_id].label = label

    def split(self, cell_id: int) -> list[Cell]:
        parent = self.cells.pop(cell_id)
        children = split_cell(parent, self.next_id, self.domain.scale)
        self.next_id += len(children)
        for c in children:
            self.cells[c.id] = c
        return children

    def volume(self, label: str) -> float:
        return volume(self.by_label(label), self.domain)

    def locate(self, points: np.ndarray, label: str, tol: float = 1e-12) -> np.ndarray:
        """Boolean mask: which points lie in the closed union of cells with ``label`` (within ``tol``)."""
        return cell_index(self.by_label(label), self.domain).gap(points) <= tol

    def check_tiling(self, atol: float = 1e-9) -> bool:
        """Cheap integrity check: volumes add up and no two cells overlap at their centers."""
        if abs(volume(self.cells.values(), self.domain) - self.domain.volume()) > atol * self.domain.volume():
            return False
        cells = list(self.cells.values())
        idx = CellIndex(cells, self.domain)
        centers = np.array([c.center for c in cells])
        # each center lies strictly inside exactly one cell: its own
        inside = idx.gap(centers)
        return bool(np.all(inside < 0))

    def to_json(self) -> list[dict]:
        return [c.to_json() for _, c in sorted(self.cells.items())]

    @classmethod
    def from_json(cls, domain: Domain, items: list[dict]) -> "Partition":
        part = cls(domain=domain)
        for d in items:
            if d["label"] not in LABELS:
                raise ValueError(f"unknown label {d['label']!r}")
            c = Cell(center=d["center"], radius=d["radius"], id=int(d["id"]), label=d["label"])
            part.cells[c.id] = c
        part.next_id = max(part.cells, default=-1) + 1
        return part


def cells_to_json(cells: Iterable[Cell]) -> str:
    items = sorted((c.to_json() for c in cells), key=lambda d: d["id"])
    return json.dumps(items, sort_keys=True)


def cells_from_json(text: str) -> list[Cell]:
    return [
        Cell(center=d["center"], radius=d["radius"], id=int(d["id"]), label=d["label"])
        for d in json.loads(text)
    ]
