"""Analytic unsafe sets with signed distances in the domain's scaled infinity norm."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Domain


class UnsafeSet:
    def signed_distance(self, x: np.ndarray, domain: Domain) -> np.ndarray:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Empty(UnsafeSet):
    def signed_distance(self, x, domain):
        return np.full(np.atleast_2d(x).shape[0], np.inf)

    def to_json(self):
        return {"shape": "empty"}


@dataclass(frozen=True)
class Box(UnsafeSet):
    lo: tuple
    hi: tuple

    def signed_distance(self, x, domain):
        x = domain.wrap(np.atleast_2d(np.asarray(x, dtype=float)))
        lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
        below = (lo - x) / domain.scale
        above = (x - hi) / domain.scale
        outside = np.maximum(np.maximum(below, above), 0.0).max(axis=1)
        depth = np.minimum(-below, -above).min(axis=1)
        return np.where(outside > 0, outside, -np.maximum(depth, 0.0))

    def to_json(self):
        return {"shape": "box", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class Ball(UnsafeSet):
    """Euclidean ball ``||x[axes] - center|| <= radius``; with ``axes`` a strict
    subset of the coordinates this is a cylinder along the remaining ones."""

    center: tuple
    radius: float
    axes: tuple | None = None

    def signed_distance(self, x, domain):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        axes = list(range(x.shape[1])) if self.axes is None else list(self.axes)
        d = x[:, axes] - np.asarray(self.center, dtype=float)
        per = domain.periodic_mask[axes]
        if per.any():
            ext = domain.extent[axes][per]
            d[:, per] -= ext * np.round(d[:, per] / ext)
        a = np.abs(d)
        w = domain.scale[axes]
        R = float(self.radius)
        inside = np.sum(a * a, axis=1) <= R * R
        out = np.empty(x.shape[0])
        if inside.any():
            out[inside] = -_ball_depth(a[inside], w, R)
        if (~inside).any():
            out[~inside] = _ball_gap(a[~inside], w, R)
        return out

    def to_json(self):
        d = {"shape": "ball", "center": list(self.center), "radius": self.radius}
        if self.axes is not None:
            d["axes"] = list(self.axes)
        return d


def Cylinder(axes: Sequence[int], center: Sequence[float], radius: float) -> Ball:
    return Ball(center=tuple(center), radius=radius, axes=tuple(axes))


def _ball_depth(a: np.ndarray, w: np.ndarray, R: float) -> np.ndarray:
    # largest s with sum_i (a_i + s w_i)^2 <= R^2
    A = np.sum(w * w)
    B = 2.0 * (a @ w)
    C = np.sum(a * a, axis=1) - R * R
    disc = np.maximum(B * B - 4 * A * C, 0.0)
    return np.maximum((-B + np.sqrt(disc)) / (2 * A), 0.0)


def _ball_gap(a: np.ndarray, w: np.ndarray, R: float) -> np.ndarray:
    # smallest s with sum_i max(a_i - s w_i, 0)^2 <= R^2; piecewise quadratic in s
    P, k = a.shape
    brk = a / w
    order = np.argsort(-brk, axis=1)
    bs = np.take_along_axis(brk, order, axis=1)
    asrt = np.take_along_axis(a, order, axis=1)
    wsrt = w[order]
    out = np.full(P, np.nan)
    for j in range(1, k + 1):
        # on the piece where exactly the j largest breakpoints are active
        aa, ww = asrt[:, :j], wsrt[:, :j]
        A = np.sum(ww * ww, axis=1)
        B = -2.0 * np.sum(aa * ww, axis=1)
        C = np.sum(aa * aa, axis=1) - R * R
        disc = np.maximum(B * B - 4 * A * C, 0.0)
        s = (-B - np.sqrt(disc)) / (2 * A)
        lo = bs[:, j] if j < k else np.zeros(P)
        hi = bs[:, j - 1]
        ok = np.isnan(out) & (s >= lo - 1e-12) & (s <= hi + 1e-12)
        out[ok] = s[ok]
    return np.maximum(np.nan_to_num(out, nan=0.0), 0.0)


@dataclass(frozen=True)
class Union(UnsafeSet):
    """Union of shapes. Exact outside; inside, the depth is the largest
    component depth, which never overstates the true depth."""

    parts: tuple

    def signed_distance(self, x, domain):
        if not self.parts:
            return Empty().signed_distance(x, domain)
        return np.min([p.signed_distance(x, domain) for p in self.parts], axis=0)

    def to_json(self):
        return {"shape": "union", "parts": [p.to_json() for p in self.parts]}


def unsafe_from_json(d: dict | None) -> UnsafeSet:
    if not d:
        return Empty()
    shape = d.get("shape")
    if shape == "empty":
        return Empty()
    if shape == "box":
        return Box(lo=tuple(d["lo"]), hi=tuple(d["hi"]))
    if shape == "ball":
        axes = d.get("axes")
        return Ball(center=tuple(d["center"]), radius=float(d["radius"]), axes=tuple(axes) if axes else None)
    if shape == "cylinder":
        return Cylinder(axes=d["axes"], center=d.get("center", [0.0] * len(d["axes"])), radius=float(d["radius"]))
    if shape == "union":
        return Union(parts=tuple(unsafe_from_json(p) for p in d["parts"]))
    raise ValueError(f"unknown unsafe-set shape {shape!r}")
