"""Control systems, fixed-step RK4 integration and control-signal sampling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numba
import numpy as np

from .geometry import Domain


@dataclass(frozen=True)
class VectorField:
    """``x' = F(x, u)`` with box controls.

    ``rhs`` is vectorized: it maps states ``(P, n)`` and controls ``(P, m)`` to
    derivatives ``(P, n)``. ``lipschitz`` and ``speed`` are bounds in the scaled
    infinity norm of the domain the field was built for; ``speed`` holds on
    ``box`` (trajectories leaving ``box`` are flagged as escaped).
    """

    name: str
    n: int
    u_low: np.ndarray
    u_high: np.ndarray
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float
    speed: float
    box: tuple | None = None
    certified: bool = True
    params: dict | None = None
    # optional compiled scalar rule ``kernel(x, u, out)``; enables the fast integrator
    kernel: Callable | None = None

    @property
    def m(self) -> int:
        return int(np.size(self.u_low))

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.ndim == 1:
            return self.rhs(x[None, :], np.atleast_1d(u)[None, :])[0]
        return self.rhs(x, u.reshape(x.shape[0], self.m))

    def with_bounds(self, lipschitz: float, speed: float, certified: bool = False) -> "VectorField":
        return replace(self, lipschitz=float(lipschitz), speed=float(speed), certified=certified)


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant input: ``values[j]`` is applied on ``(breakpoints[j-1], breakpoints[j]]``."""

    breakpoints: np.ndarray
    values: np.ndarray

    @property
    def n_seg(self) -> int:
        return len(self.breakpoints)

    def __call__(self, t: float) -> np.ndarray:
        j = int(np.searchsorted(self.breakpoints, t, side="left"))
        return self.values[min(j, self.n_seg - 1)]

    def concat(self, other: "ControlSignal") -> "ControlSignal":
        bp = np.concatenate([self.breakpoints, self.breakpoints[-1] + other.breakpoints])
        return ControlSignal(bp, np.concatenate([self.values, other.values]))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    escaped: bool = False


def _steps(tau: float, dt: float) -> int:
    k = int(round(tau / dt))
    if k < 0 or abs(k * dt - tau) > 1e-9 * max(1.0, tau):
        raise ValueError(f"dt={dt} does not divide tau={tau}")
    return k


def step_controls(values: np.ndarray, breakpoints: np.ndarray, dt: float, n_steps: int) -> np.ndarray:
    """Per-step control index for a piecewise-constant schedule on the time grid."""
    mids = (np.arange(n_steps) + 0.5) * dt
    seg = np.searchsorted(breakpoints, mids, side="left")
    return np.minimum(seg, len(breakpoints) - 1)


def rk4_batch(
    field: VectorField,
    x0: np.ndarray,
    controls: np.ndarray,
    dt: float,
    domain: Domain | None = None,
    return_rates: bool = False,
):
    """Integrate many trajectories at once.

    ``x0`` is ``(P, n)`` (or ``(n,)`` shared by all), ``controls`` is
    ``(P, K, m)``: the control held on each of the ``K`` steps. Returns states
    ``(P, K + 1, n)`` and the index of the first state outside ``field.box``
    (``K + 1`` when the trajectory never escapes). With ``return_rates`` the
    derivatives ``F(x_k, u_k)`` at the start of each step, ``(P, K, n)``, are
    returned as a third array.
    """
    controls = np.asarray(controls, dtype=float)
    P, K, _ = controls.shape
    if field.kernel is not None:
        return _rk4_compiled(field, x0, controls, dt, domain, return_rates)
    x = np.broadcast_to(np.asarray(x0, dtype=float), (P, field.n)).copy()
    out = np.empty((P, K + 1, field.n))
    out[:, 0] = x
    rates = np.empty((P, K, field.n)) if return_rates else None
    f = field.rhs
    for k in range(K):
        u = controls[:, k]
        k1 = f(x, u)
        if rates is not None:
            rates[:, k] = k1
        k2 = f(x + 0.5 * dt * k1, u)
        k3 = f(x + 0.5 * dt * k2, u)
        k4 = f(x + dt * k3, u)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if domain is not None:
            x = domain.wrap(x)
        out[:, k + 1] = x
    first_escape = np.full(P, K + 1)
    if field.box is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in field.box)
        bad = np.any((out < lo) | (out > hi), axis=2)
        any_bad = bad.any(axis=1)
        first_escape[any_bad] = np.argmax(bad[any_bad], axis=1)
    if return_rates:
        return out, first_escape, rates
    return out, first_escape


_DRIVERS: dict = {}


def _driver(kernel):
    if kernel not in _DRIVERS:

        @numba.njit(cache=False)
        def run(x0, controls, dt, lo, ext, per, box_lo, box_hi, out, rates, esc, keep_rates):
            P, K, m = controls.shape
            n = x0.shape[1]
            k1 = np.empty(n)
            k2 = np.empty(n)
            k3 = np.empty(n)
            k4 = np.empty(n)
            y = np.empty(n)
            x = np.empty(n)
            for p in range(P):
                for i in range(n):
                    x[i] = x0[p, i]
                    out[p, 0, i] = x[i]
                esc[p] = K + 1
                for i in range(n):
                    if x[i] < box_lo[i] or x[i] > box_hi[i]:
                        esc[p] = 0
                for k in range(K):
                    u = controls[p, k]
                    kernel(x, u, k1)
                    for i in range(n):
                        y[i] = x[i] + 0.5 * dt * k1[i]
                    kernel(y, u, k2)
                    for i in range(n):
                        y[i] = x[i] + 0.5 * dt * k2[i]
                    kernel(y, u, k3)
                    for i in range(n):
                        y[i] = x[i] + dt * k3[i]
                    kernel(y, u, k4)
                    for i in range(n):
                        x[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                        if per[i]:
                            x[i] = lo[i] + np.mod(x[i] - lo[i], ext[i])
                        out[p, k + 1, i] = x[i]
                        if keep_rates:
                            rates[p, k, i] = k1[i]
                        if esc[p] == K + 1 and (x[i] < box_lo[i] or x[i] > box_hi[i]):
                            esc[p] = k + 1

        _DRIVERS[kernel] = run
    return _DRIVERS[kernel]


def _rk4_compiled(field, x0, controls, dt, domain, return_rates):
    P, K, _ = controls.shape
    n = field.n
    x = np.ascontiguousarray(np.broadcast_to(np.asarray(x0, dtype=float), (P, n)))
    out = np.empty((P, K + 1, n))
    rates = np.empty((P, K, n) if return_rates else (1, 1, n))
    esc = np.empty(P, dtype=np.int64)
    if domain is not None:
        per = domain.periodic_mask.copy()
        lo, ext = domain.lower.astype(float), domain.extent.astype(float)
    else:
        per, lo, ext = np.zeros(n, dtype=bool), np.zeros(n), np.ones(n)
    if field.box is not None:
        box_lo, box_hi = (np.asarray(b, dtype=float) for b in field.box)
    else:
        box_lo, box_hi = np.full(n, -np.inf), np.full(n, np.inf)
    _driver(field.kernel)(
        x, np.ascontiguousarray(controls), float(dt), lo, ext, per, box_lo, box_hi, out, rates, esc, return_rates
    )
    if return_rates:
        return out, esc, rates
    return out, esc


def integrate(
    field: VectorField,
    x0: np.ndarray,
    signal: ControlSignal,
    tau: float,
    dt: float,
    domain: Domain | None = None,
) -> Trajectory:
    K = _steps(tau, dt)
    grid = np.arange(K + 1) * dt
    if not np.all(np.isclose(signal.breakpoints / dt, np.rint(signal.breakpoints / dt), atol=1e-9)):
        raise ValueError("control breakpoints must fall on the integration grid")
    idx = step_controls(signal.values, signal.breakpoints, dt, K)
    states, esc = rk4_batch(field, np.asarray(x0, dtype=float)[None], signal.values[idx][None], dt, domain)
    stop = int(esc[0])
    if stop <= K:
        return Trajectory(grid[:stop], states[0, :stop], escaped=True)
    return Trajectory(grid, states[0])


def control_prefix(field: VectorField) -> np.ndarray:
    """Constant extreme and zero controls: ``2m + 1`` rows."""
    lo, hi = np.atleast_1d(field.u_low), np.atleast_1d(field.u_high)
    zero = np.clip(0.0, lo, hi)
    rows = []
    for j in range(field.m):
        for v in (lo[j], hi[j]):
            u = zero.copy()
            u[j] = v
            rows.append(u)
    rows.append(zero)
    return np.array(rows)


def sample_control_values(field: VectorField, n_s: int, n_seg: int, seed: int) -> np.ndarray:
    """Segment values ``(n_s, n_seg, m)``: the deterministic prefix, then
    i.i.d. uniform draws from ``np.random.default_rng(seed)``."""
    if n_s < 1 or n_seg < 1:
        raise ValueError("n_s and n_seg must be positive")
    prefix = control_prefix(field)[:n_s]
    vals = np.empty((n_s, n_seg, field.m))
    vals[: len(prefix)] = prefix[:, None, :]
    rest = n_s - len(prefix)
    if rest > 0:
        rng = np.random.default_rng(seed)
        vals[len(prefix):] = rng.uniform(field.u_low, field.u_high, size=(rest, n_seg, field.m))
    return vals


def sample_controls(field: VectorField, n_s: int, n_seg: int, seed: int, tau: float = 1.0) -> list[ControlSignal]:
    vals = sample_control_values(field, n_s, n_seg, seed)
    bp = tau * np.arange(1, n_seg + 1) / n_seg
    return [ControlSignal(bp.copy(), v) for v in vals]


def dubins3d(v: float = 5.0, domain: Domain | None = None, margin: float = 20.0) -> VectorField:
    """Relative pursuit-evasion dynamics with turn-rate control ``u in [-1, 1]``.

    Bounds are computed in the metric of ``domain`` (default: the benchmark
    domain). The Jacobian does not depend on the planar coordinates, so the
    Lipschitz bound is global; the speed bound holds on the domain enlarged by
    ``margin`` in the planar coordinates, which is also the escape box.
    """
    if v < 0:
        raise ValueError("speed must be nonnegative")
    if domain is None:
        domain = dubins_domain()
    s = domain.scale
    lo = domain.lower.copy()
    hi = domain.upper.copy()
    lo[:2] -= margin
    hi[:2] += margin
    xmax = np.maximum(np.abs(lo[:2]), np.abs(hi[:2]))

    def rhs(x, u):
        u = u[:, 0]
        out = np.empty_like(x)
        out[:, 0] = -v + v * np.cos(x[:, 2]) + u * x[:, 1]
        out[:, 1] = v * np.sin(x[:, 2]) - u * x[:, 0]
        out[:, 2] = -u
        return out

    # induced scaled-infinity norm of the Jacobian, |u| <= 1, |sin|, |cos| <= 1
    L = max((s[1] + v * s[2]) / s[0], (s[0] + v * s[2]) / s[1])
    M = max((2 * v + xmax[1]) / s[0], (v + xmax[0]) / s[1], 1.0 / s[2])
    box = (np.array([lo[0], lo[1], -np.inf]), np.array([hi[0], hi[1], np.inf]))
    return VectorField(
        name="dubins3d", n=3, u_low=np.array([-1.0]), u_high=np.array([1.0]), rhs=rhs,
        lipschitz=float(L), speed=float(M), box=box, params={"v": float(v)}, kernel=_dubins_kernel(float(v)),
    )


_DUBINS_KERNELS: dict = {}


def _dubins_kernel(v: float):
    if v not in _DUBINS_KERNELS:

        @numba.njit(cache=False)
        def kernel(x, u, out):
            out[0] = -v + v * np.cos(x[2]) + u[0] * x[1]
            out[1] = v * np.sin(x[2]) - u[0] * x[0]
            out[2] = -u[0]

        _DUBINS_KERNELS[v] = kernel
    return _DUBINS_KERNELS[v]


def dubins_domain(half_width: float = 10.0) -> Domain:
    """``[-w, w]^2 x [0, 2 pi)`` with the angle scaled so one cell of radius ``w`` covers it."""
    return Domain(
        lower=[-half_width, -half_width, 0.0],
        upper=[half_width, half_width, 2 * np.pi],
        periodic=(False, False, True),
        scale=[1.0, 1.0, np.pi / half_width],
    )


def single_integrator(n: int = 1, domain: Domain | None = None) -> VectorField:
    if n < 1:
        raise ValueError("dimension must be positive")
    s = np.ones(n) if domain is None else domain.scale
    return VectorField(
        name=f"integrator{n}d", n=n, u_low=-np.ones(n), u_high=np.ones(n),
        rhs=lambda x, u: np.array(u, dtype=float, copy=True),
        lipschitz=0.0, speed=float(np.max(1.0 / s)),
    )


SYSTEMS = {
    "dubins3d": lambda params, domain: dubins3d(domain=domain, **params),
    "integrator1d": lambda params, domain: single_integrator(1, domain),
    "integrator2d": lambda params, domain: single_integrator(2, domain),
    "integrator3d": lambda params, domain: single_integrator(3, domain),
}


def make_system(name: str, params: dict | None = None, domain: Domain | None = None) -> VectorField:
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; known: {sorted(SYSTEMS)}") from None
    return factory(dict(params or {}), domain)


def estimate_lipschitz(
    field: VectorField, domain: Domain, samples: int = 2000, seed: int = 0, factor: float = 1.5
) -> tuple[float, float]:
    """Sampled Lipschitz and speed bounds, inflated by ``factor``. Not certified."""
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    n = domain.ndim
    x = rng.uniform(domain.lower, domain.upper, size=(samples, n))
    u = rng.uniform(field.u_low, field.u_high, size=(samples, field.m))
    # half near pairs (local slopes), half far pairs
    step = rng.uniform(-1.0, 1.0, size=(samples, n)) * domain.scale
    step[: samples // 2] *= 1e-4
    step[samples // 2:] *= rng.uniform(0.0, 0.5, size=(samples - samples // 2, 1)) * domain.extent.min()
    y = domain.wrap(np.clip(x + step, domain.lower, domain.upper))
    dxy = domain.norm(domain.diff(y, x))
    ok = dxy > 0
    fx, fy = field.rhs(x, u), field.rhs(y, u)
    slopes = domain.norm(fy - fx)[ok] / dxy[ok]
    L = float(slopes.max()) if slopes.size else 0.0
    M = float(domain.norm(np.concatenate([fx, fy])).max())
    return factor * L, factor * M
