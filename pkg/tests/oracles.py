"""Independent reference computations shared by the test modules."""

import numpy as np
from scipy.spatial import cKDTree

from rcbf.geometry import SAFE, UNSAFE, Domain, Partition


def random_tiling(rng, n, depth, p_split=0.5):
    d = Domain([-1.0] * n, [1.0] * n)
    part = Partition.from_domain(d)
    for _ in range(depth):
        for c in list(part.cells.values()):
            if rng.random() < p_split:
                part.split(c.id)
    for c in part.cells.values():
        c.label = SAFE if rng.random() < 0.4 else UNSAFE
    return part


def union_boundary(boxes, samples_per_face=200):
    """Dense samples of the boundary of a union of boxes.

    Samples every face of every box and drops samples interior to another
    box or lying on a face shared by two adjacent members.
    """
    n = len(boxes[0][0])
    pts = []
    for lo, hi in boxes:
        for ax in range(n):
            for side in (lo[ax], hi[ax]):
                grids = [np.linspace(lo[i], hi[i], samples_per_face) if i != ax else np.array([side]) for i in range(n)]
                pts.append(np.stack([m.ravel() for m in np.meshgrid(*grids, indexing="ij")], axis=1))
    pts = np.concatenate(pts)
    inner = np.zeros(len(pts), dtype=bool)
    for lo, hi in boxes:
        inner |= np.all((pts > lo + 1e-12) & (pts < hi - 1e-12), axis=1)
    # a sample is on the boundary only if some nudge leaves the union
    both = np.ones(len(pts), dtype=bool)
    for ax in range(n):
        for s in (-1e-9, 1e-9):
            q = pts.copy()
            q[:, ax] += s
            mem = np.zeros(len(pts), dtype=bool)
            for lo, hi in boxes:
                mem |= np.all((q >= lo) & (q <= hi), axis=1)
            both &= mem
    return pts[~inner & ~both]


class DenseSignedDistance:
    """Signed infinity-norm distance to a union of boxes from boundary samples."""

    def __init__(self, boxes, samples_per_face=200):
        self.boxes = boxes
        self.tree = cKDTree(union_boundary(boxes, samples_per_face))

    def __call__(self, xs):
        xs = np.atleast_2d(xs)
        d, _ = self.tree.query(xs, p=np.inf)
        member = np.zeros(len(xs), dtype=bool)
        for lo, hi in self.boxes:
            member |= np.all((xs >= lo) & (xs <= hi), axis=1)
        return np.where(member, -d, d)


def brute_sd(x, boxes, domain, samples_per_face=200):
    return float(DenseSignedDistance(boxes, samples_per_face)(x)[0])
