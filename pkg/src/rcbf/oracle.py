"""Brute-force backward reachable tubes on a dense grid, and comparison metrics.

``V_0 = l`` with ``l`` the signed distance to the unsafe set, then
``V_{k+1}(x) = min(l(x), max_u V_k(x^+(x, u)))`` for ``tau / dt`` steps, where
``x^+`` is one step of length ``dt`` (RK4 by default, explicit Euler on request) and ``V_k`` is read off the grid by
multilinear interpolation. Nodes with ``V <= 0`` form the tube estimate.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .dynamics import VectorField
from .geometry import UNSAFE, Domain, Partition
from .sets import UnsafeSet

OUTSIDE_POLICIES = ("escape", "clamp")
SCHEMES = ("rk4", "euler")


@dataclass
class GridValueField:
    domain: Domain
    counts: np.ndarray
    values: np.ndarray
    tau: float
    dt: float
    n_controls: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=int)
        self.values = np.asarray(self.values, dtype=float).reshape(tuple(self.counts))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def axes(self) -> list[np.ndarray]:
        return grid_axes(self.domain, self.counts)

    @property
    def nodes(self) -> np.ndarray:
        return grid_nodes(self.domain, self.counts)

    @property
    def brt_mask(self) -> np.ndarray:
        return self.values <= 0.0

    @property
    def node_weights(self) -> np.ndarray:
        return node_weights(self.domain, self.counts)

    def brt_volume(self) -> float:
        return float(self.node_weights[self.brt_mask].sum())

    def brt_nodes(self) -> np.ndarray:
        return self.nodes[self.brt_mask.ravel()]

    def to_json(self) -> dict:
        return {
            "domain": self.domain.to_json(), "counts": self.counts.tolist(), "tau": self.tau, "dt": self.dt,
            "n_controls": self.n_controls, "brt_nodes": int(self.brt_mask.sum()),
            "brt_volume": self.brt_volume(), "meta": self.meta,
        }


def grid_axes(domain: Domain, counts) -> list[np.ndarray]:
    """Node coordinates per axis: endpoints included, except the duplicate seam node on periodic axes."""
    axes = []
    for i, n in enumerate(np.asarray(counts, dtype=int)):
        if n < 2:
            raise ValueError("need at least two nodes per axis")
        lo, hi = domain.lower[i], domain.upper[i]
        if domain.periodic_mask[i]:
            axes.append(lo + (hi - lo) * np.arange(n) / n)
        else:
            axes.append(np.linspace(lo, hi, n))
    return axes


def grid_nodes(domain: Domain, counts) -> np.ndarray:
    axes = grid_axes(domain, counts)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def node_weights(domain: Domain, counts) -> np.ndarray:
    """Trapezoid volume weights; they sum to the domain volume."""
    ws = []
    for i, n in enumerate(np.asarray(counts, dtype=int)):
        h = domain.extent[i] / (n if domain.periodic_mask[i] else n - 1)
        w = np.full(n, h)
        if not domain.periodic_mask[i]:
            w[[0, -1]] *= 0.5
        ws.append(w)
    out = ws[0]
    for w in ws[1:]:
        out = np.multiply.outer(out, w)
    return out


def _control_grid(field_: VectorField, n_controls: int) -> np.ndarray:
    lo, hi = np.atleast_1d(field_.u_low), np.atleast_1d(field_.u_high)
    per = [np.linspace(a, b, n_controls) if n_controls > 1 else np.array([(a + b) / 2]) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*per)))


def _rk4_step(field_: VectorField, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    k1 = field_.rhs(x, u)
    k2 = field_.rhs(x + 0.5 * dt * k1, u)
    k3 = field_.rhs(x + 0.5 * dt * k2, u)
    k4 = field_.rhs(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def interpolation_matrix(domain: Domain, counts, points: np.ndarray, outside: str = "escape"):
    """Sparse multilinear interpolation weights from grid values to ``points``.

    Returns ``(W, escaped)``; rows of escaped points (outside a non-periodic
    face under the ``escape`` policy) are empty.
    """
    if outside not in OUTSIDE_POLICIES:
        raise ValueError(f"unknown outside policy {outside!r}")
    counts = np.asarray(counts, dtype=int)
    P, n = points.shape
    x = domain.wrap(points)
    escaped = np.zeros(P, dtype=bool)
    lo_idx = np.empty((P, n), dtype=np.int64)
    frac = np.empty((P, n))
    for i in range(n):
        N = counts[i]
        if domain.periodic_mask[i]:
            h = domain.extent[i] / N
            s = (x[:, i] - domain.lower[i]) / h
            j = np.floor(s).astype(np.int64)
            frac[:, i] = s - j
            lo_idx[:, i] = np.mod(j, N)
        else:
            h = domain.extent[i] / (N - 1)
            s = (x[:, i] - domain.lower[i]) / h
            if outside == "escape":
                escaped |= (s < 0) | (s > N - 1)
            s = np.clip(s, 0.0, N - 1)
            j = np.minimum(np.floor(s).astype(np.int64), N - 2)
            frac[:, i] = s - j
            lo_idx[:, i] = j
    strides = np.array([int(np.prod(counts[i + 1:])) for i in range(n)], dtype=np.int64)
    rows, cols, vals = [], [], []
    keep = np.flatnonzero(~escaped)
    for corner in itertools.product((0, 1), repeat=n):
        idx = np.zeros(keep.size, dtype=np.int64)
        w = np.ones(keep.size)
        for i, c in enumerate(corner):
            j = lo_idx[keep, i] + c
            if domain.periodic_mask[i]:
                j = np.mod(j, counts[i])
            idx += j * strides[i]
            w *= frac[keep, i] if c else 1.0 - frac[keep, i]
        rows.append(keep)
        cols.append(idx)
        vals.append(w)
    W = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(P, int(np.prod(counts)))
    )
    return W, escaped


def brute_force_brt(
    field_: VectorField,
    unsafe_set: UnsafeSet,
    domain: Domain,
    tau: float,
    grid_res,
    n_controls: int = 5,
    dt: float = 0.01,
    outside: str = "escape",
    scheme: str = "rk4",
) -> GridValueField:
    """Discrete-time tube of states that no sampled control keeps out of the unsafe set."""
    counts = np.broadcast_to(np.asarray(grid_res, dtype=int), (domain.ndim,)).copy()
    if tau < 0 or dt <= 0:
        raise ValueError("need tau >= 0 and dt > 0")
    steps = int(round(tau / dt))
    if abs(steps * dt - tau) > 1e-9 * max(tau, 1.0):
        raise ValueError("dt must divide tau")
    if n_controls < 1:
        raise ValueError("need at least one control value")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    nodes = grid_nodes(domain, counts)
    l = unsafe_set.signed_distance(nodes, domain)
    if not np.all(np.isfinite(l)):
        # empty unsafe set: nothing is ever reached
        l = np.where(np.isfinite(l), l, np.finfo(float).max / 4)
    V = l.copy()
    if steps:
        maps = []
        for u in _control_grid(field_, n_controls):
            uu = np.broadcast_to(u, (nodes.shape[0], u.size))
            nxt = _rk4_step(field_, nodes, uu, dt) if scheme == "rk4" else nodes + dt * field_.rhs(nodes, uu)
            maps.append(interpolation_matrix(domain, counts, nxt, outside))
        for _ in range(steps):
            best = np.full(V.shape, -np.inf)
            for W, esc in maps:
                val = W @ V
                val[esc] = np.inf
                np.maximum(best, val, out=best)
            V = np.minimum(l, best)
    meta = {"system": field_.name, "unsafe_set": unsafe_set.to_json(), "outside": outside, "scheme": scheme}
    return GridValueField(domain, counts, V, float(tau), float(dt), int(n_controls), meta)


def captured(partition: Partition, oracle: GridValueField, tol: float = 1e-9) -> np.ndarray:
    """For each oracle tube node, whether it lies in the closed unsafe union."""
    pts = oracle.brt_nodes()
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    return partition.locate(pts, UNSAFE, tol=tol)


def containment_fraction(partition: Partition, oracle: GridValueField, tol: float = 1e-9) -> float:
    """Share of oracle tube nodes inside the unsafe cells; NaN when the tube is empty."""
    hit = captured(partition, oracle, tol)
    if hit.size == 0:
        return math.nan
    return float(hit.mean())


def volume_gap(partition: Partition, oracle: GridValueField) -> float:
    v = oracle.brt_volume()
    if v <= 0:
        raise ValueError("oracle tube has zero volume")
    return (partition.volume(UNSAFE) - v) / v


# -- serialization -------------------------------------------------------------


def to_bytes(oracle: GridValueField) -> bytes:
    """Header ``[n, counts, lower, upper]`` then row-major values, all little-endian float64."""
    n = oracle.domain.ndim
    header = [float(n)] + [float(c) for c in oracle.counts] + oracle.domain.lower.tolist() + oracle.domain.upper.tolist()
    return struct.pack(f"<{len(header)}d", *header) + np.ascontiguousarray(oracle.values, dtype="<f8").tobytes(order="C")


def from_bytes(raw: bytes, sidecar: dict) -> GridValueField:
    (n,) = struct.unpack_from("<d", raw, 0)
    n = int(n)
    head = struct.unpack_from(f"<{1 + 3 * n}d", raw, 0)
    counts = np.array(head[1:1 + n], dtype=int)
    lower, upper = np.array(head[1 + n:1 + 2 * n]), np.array(head[1 + 2 * n:])
    domain = Domain.from_json(sidecar["domain"])
    if not (np.array_equal(lower, domain.lower) and np.array_equal(upper, domain.upper)):
        raise ValueError("binary header and sidecar disagree on the domain")
    values = np.frombuffer(raw, dtype="<f8", offset=8 * (1 + 3 * n))
    if values.size != int(np.prod(counts)):
        raise ValueError("payload size does not match the header counts")
    return GridValueField(
        domain, counts, values.reshape(tuple(counts)).astype(float), sidecar["tau"], sidecar["dt"],
        sidecar["n_controls"], sidecar.get("meta", {}),
    )
