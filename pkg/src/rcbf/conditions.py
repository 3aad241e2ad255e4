"""Robust cell conditions evaluated on time-gridded trajectories.

Trajectory arrays are sampled on the full grid ``t_k = k * dt``,
``k = 0..K`` with ``K * dt = tau``. Conditions quantified over ``(0, tau]``
ignore the ``t_0`` entry.

Safe-side conditions are certificates in continuous time. A universal
condition holds between grid points via a per-interval bound ``step`` on how
far the state can move in one step (``M * dt`` unless a tighter bound is
passed). An existential condition uses grid points, which are genuine times,
and needs no such bound. Every condition absorbs the integration error
``eps_int``.

Unsafe-side conditions only sample finitely many controls, so an unsafe verdict
is a conservative label, not a certificate of backward reachability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RcbfParams:
    tau: float
    alpha: float
    beta: float
    L: float
    M: float
    dt: float
    eps_int: float | None = None

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if self.L < 0 or self.M < 0:
            raise ValueError("L and M must be nonnegative")
        if not self.dt > 0 or (self.tau > 0 and self.dt > self.tau * (1 + 1e-12)):
            raise ValueError("dt must lie in (0, tau]")
        if self.tau > 0:
            k = round(self.tau / self.dt)
            if abs(k * self.dt - self.tau) > 1e-9 * self.tau:
                raise ValueError("dt must divide tau")
        if self.eps_int is None:
            object.__setattr__(self, "eps_int", 1e-6 * float(np.exp(self.L * self.tau)))
        elif self.eps_int < 0:
            raise ValueError("eps_int must be nonnegative")

    @property
    def steps(self) -> int:
        return int(round(self.tau / self.dt)) if self.tau > 0 else 0

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("tau", "alpha", "beta", "L", "M", "dt", "eps_int")}


@dataclass(frozen=True)
class ValidityParams:
    a1: float
    a2: float
    alpha: float
    beta: float
    alpha_hat: float
    beta_hat: float
    delta_bar: float
    delta_underbar: float

    def __post_init__(self):
        # a2 == a1 is accepted: the sector term then vanishes
        if not self.a2 >= self.a1 > 0:
            raise ValueError("sector bounds need a2 >= a1 > 0")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if not self.alpha_hat > self.alpha:
            raise ValueError("alpha_hat must exceed alpha")
        if not 0 < self.beta_hat < self.beta:
            raise ValueError("beta_hat must lie in (0, beta)")
        if not self.delta_bar >= self.delta_underbar > 0:
            raise ValueError("need delta_bar >= delta_underbar > 0")


def gamma(s, alpha: float, beta: float):
    """Rate ``alpha`` on nonnegative arguments and ``beta`` on negative ones."""
    out = np.where(np.asarray(s) >= 0, alpha, beta)
    return float(out) if out.ndim == 0 else out


def deviation_bound(r, L: float, t):
    """Largest separation at time ``t`` of two trajectories that start ``r``
    apart and share one control."""
    out = np.asarray(r, dtype=float) * np.exp(L * np.asarray(t, dtype=float))
    return float(out) if out.ndim == 0 else out


def _grid(values, params: RcbfParams) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size != params.steps + 1:
        raise ValueError(f"expected {params.steps + 1} grid values, got shape {v.shape}")
    return v


def _steps_or_default(step, params: RcbfParams) -> np.ndarray:
    if step is None:
        return np.full(params.steps, params.M * params.dt)
    step = np.asarray(step, dtype=float)
    return step[: params.steps]


def outside_margins(sd_traj, r: float, params: RcbfParams, step=None) -> np.ndarray:
    """Per-grid-point slack of the robust safe condition; all must be positive."""
    sd = _grid(sd_traj, params)
    t = params.times
    K = params.steps
    need = deviation_bound(r, params.L, np.append(t[1:], t[-1])) + params.eps_int
    slack = sd - need
    if K:
        slack[:K] -= _steps_or_default(step, params)
    return slack


def check_outside_brt(sd_traj, r: float, params: RcbfParams, step=None) -> bool:
    """True iff ``sd`` stays strictly above ``r e^{Lt}`` on all of ``[0, tau]``.

    On ``[t_k, t_{k+1}]`` the requirement is ``sd_k - step_k > r e^{L t_{k+1}} + eps``;
    the last grid point has no following interval.
    """
    return bool(np.all(outside_margins(sd_traj, r, params, step) > 0))


def check_inside_brt(sd_trajs, r: float, params: RcbfParams) -> bool:
    """True iff every sampled trajectory has a grid time with ``sd < -r e^{Lt} - eps``."""
    sd = np.atleast_2d(np.asarray(sd_trajs, dtype=float))
    if sd.size == 0:
        raise ValueError("no trajectories")
    if sd.shape[1] != params.steps + 1:
        raise ValueError(f"expected {params.steps + 1} grid values per trajectory")
    thr = -deviation_bound(r, params.L, params.times) - params.eps_int
    return bool(np.all(np.any(sd < thr, axis=1)))


def _grow(s, t, alpha, beta):
    # e^{gamma(s) t} s, nondecreasing in s
    return np.exp(np.where(s >= 0, alpha, beta) * t) * s


def recurrent_score(h_traj, r: float, params: RcbfParams) -> float:
    """``max_k e^{gamma(h^-_k) t_k} h^-_k`` over grid times in ``(0, tau]``."""
    h = _grid(h_traj, params)
    t = params.times[1:]
    hm = h[1:] - deviation_bound(r, params.L, t) - params.eps_int
    return float(np.max(_grow(hm, t, params.alpha, params.beta))) if t.size else -np.inf


def check_robust_recurrent(h_traj, h_x: float, r: float, params: RcbfParams) -> bool:
    """Robust RCBF condition from a cell center under one control."""
    if params.steps == 0:
        raise ValueError("empty time grid")
    return recurrent_score(h_traj, r, params) >= h_x + r


def nonrecurrent_envelope(h_traj, r: float, params: RcbfParams, step=None) -> float:
    """Upper bound of ``e^{gamma(h^+) t} h^+`` over ``[t_1, tau]``.

    On ``[t_k, t_{k+1}]``, ``h^+ <= h_k + step_k + r e^{L t_{k+1}} + eps =: U_k`` and the
    growth factor is monotone, so the envelope is ``e^{alpha t_{k+1}} U_k`` for
    ``U_k >= 0`` and ``e^{beta t_k} U_k`` otherwise. The interval ``(0, t_1)`` is
    left out: as ``t -> 0`` the quantity tends to ``h(x) + r``, which would make
    the condition unsatisfiable.
    """
    h = _grid(h_traj, params)
    K = params.steps
    t = params.times
    if K == 1:
        u = h[1] + deviation_bound(r, params.L, t[1]) + params.eps_int
        return float(_grow(np.array(u), t[1], params.alpha, params.beta))
    stp = _steps_or_default(step, params)
    k = np.arange(1, K)
    U = h[k] + stp[k] + deviation_bound(r, params.L, t[k + 1]) + params.eps_int
    env = np.where(U >= 0, np.exp(params.alpha * t[k + 1]) * U, np.exp(params.beta * t[k]) * U)
    return float(env.max())


def check_robust_nonrecurrent(h_trajs, h_x: float, r: float, params: RcbfParams, steps=None) -> bool:
    """True iff no sampled control meets the RCBF condition anywhere in the cell."""
    h = np.atleast_2d(np.asarray(h_trajs, dtype=float))
    if h.size == 0:
        raise ValueError("no trajectories")
    if params.steps == 0:
        raise ValueError("empty time grid")
    for i, row in enumerate(h):
        st = None if steps is None else steps[i]
        if not nonrecurrent_envelope(row, r, params, st) < h_x - r:
            return False
    return True


def rcbf_pointwise(h_traj, h_x: float, alpha: float, beta: float, times) -> bool:
    """Plain RCBF inequality ``max_k e^{gamma(h_k) t_k} h_k >= h(x)`` over the given times."""
    h = np.asarray(h_traj, dtype=float)
    t = np.asarray(times, dtype=float)
    if h.shape != t.shape or h.size == 0:
        raise ValueError("h_traj and times must be nonempty and aligned")
    return bool(np.max(_grow(h, t, alpha, beta)) >= h_x)


def validity_min_tau(p: ValidityParams) -> float:
    """Smallest horizon for which the signed distance to an admissible set is an RCBF."""
    sector = np.log(p.a2 / p.a1)
    spread = np.log(p.delta_bar / p.delta_underbar)
    return float(
        max(sector / (p.alpha_hat - p.alpha), sector / (p.beta - p.beta_hat))
        + spread / min(p.alpha_hat, p.beta_hat)
    )
