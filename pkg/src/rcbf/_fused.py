"""Compiled integrate-and-check loops for fields that provide a scalar kernel.

Each row (one cell center under one sampled control) is integrated step by
step and checked as it goes, so it stops as soon as its outcome is fixed.
When the 1-Lipschitz bound from the last exact distance cannot decide a grid
point, the row pauses; the caller evaluates the exact signed distance for all
paused rows in one batch and calls again. The RK4 arithmetic matches
``dynamics.rk4_batch`` so witnesses replay to the same states.
"""

from __future__ import annotations

import numba
import numpy as np

# bound-based decisions must clear the threshold by this much, otherwise the
# exact value decides (keeps bound shortcuts consistent with full evaluation)
BOUND_TOL = 1e-9

_CACHE: dict = {}


def kernels(kernel):
    if kernel in _CACHE:
        return _CACHE[kernel]

    @numba.njit(cache=False, inline="always")
    def rk4_step(x, u, dt, k1, k2, k3, k4, y, lo, ext, per):
        n = x.shape[0]
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

    @numba.njit(cache=False, inline="always")
    def dist(x, y, scale, ext, per):
        m = 0.0
        for i in range(x.shape[0]):
            d = x[i] - y[i]
            if per[i]:
                d = d - ext[i] * np.round(d / ext[i])
            d = abs(d) / scale[i]
            if d > m:
                m = d
        return m

    @numba.njit(cache=False, inline="always")
    def outside(x, box_lo, box_hi):
        for i in range(x.shape[0]):
            if x[i] < box_lo[i] or x[i] > box_hi[i]:
                return True
        return False

    @numba.njit(cache=False, inline="always")
    def step_bound(k1, scale, L, eps, dt, grow, Mdt):
        s = 0.0
        for i in range(k1.shape[0]):
            a = abs(k1[i]) / scale[i]
            if a > s:
                s = a
        b = (s + L * eps) * grow
        return b if b < Mdt else Mdt

    @numba.njit(cache=False)
    def avoid(x, k, vals, seg, dt, r, anchor_v, anchor_x, alive, satu, track_u, done,
              need, exact, has_exact, eL_next, eL_now, eps, L, grow, Mdt,
              scale, lo, ext, per, box_lo, box_hi):
        R, n = x.shape
        K = seg.shape[0]
        k1 = np.empty(n)
        k2 = np.empty(n)
        k3 = np.empty(n)
        k4 = np.empty(n)
        y = np.empty(n)
        for p in range(R):
            if done[p]:
                continue
            need[p] = False
            xp = x[p]
            while True:
                kk = k[p]
                if outside(xp, box_lo, box_hi):
                    alive[p] = False
                    done[p] = True
                    break
                if kk < K:
                    u = vals[p, seg[kk]]
                    kernel(xp, u, k1)
                    stp = step_bound(k1, scale, L, eps, dt, grow, Mdt)
                else:
                    stp = 0.0
                ts = r[p] * eL_next[kk] + eps
                tu = -(r[p] * eL_now[kk] + eps)
                disp = dist(xp, anchor_x[p], scale, ext, per)
                lb = anchor_v[p] - disp
                ub = anchor_v[p] + disp
                open_u = track_u[p] and not satu[p]
                want = False
                if alive[p] and lb - stp <= ts + BOUND_TOL:
                    want = True
                if open_u:
                    if ub < tu - BOUND_TOL:
                        satu[p] = True
                    elif lb < tu + BOUND_TOL:
                        want = True
                if want:
                    if disp == 0.0:
                        v = anchor_v[p]
                    elif not has_exact[p]:
                        need[p] = True
                        break
                    else:
                        v = exact[p]
                        has_exact[p] = False
                    anchor_v[p] = v
                    for i in range(n):
                        anchor_x[p, i] = xp[i]
                    if alive[p] and not (v - stp > ts):
                        alive[p] = False
                    if open_u and v < tu:
                        satu[p] = True
                if (not alive[p]) and (satu[p] or not track_u[p]):
                    done[p] = True
                    break
                if kk == K:
                    done[p] = True
                    break
                rk4_step(xp, vals[p, seg[kk]], dt, k1, k2, k3, k4, y, lo, ext, per)
                k[p] = kk + 1

    @numba.njit(cache=False)
    def recur(x, k, vals, seg, dt, r, hx, anchor_v, anchor_x, succ, fail_u, done,
              need, exact, has_exact, eL, ea, eb, alpha, beta, eps, L, grow, Mdt,
              scale, lo, ext, per, box_lo, box_hi):
        R, n = x.shape
        K = seg.shape[0]
        k1 = np.empty(n)
        k2 = np.empty(n)
        k3 = np.empty(n)
        k4 = np.empty(n)
        y = np.empty(n)
        for p in range(R):
            if done[p]:
                continue
            need[p] = False
            xp = x[p]
            while True:
                kk = k[p]
                if kk >= 1 and outside(xp, box_lo, box_hi):
                    done[p] = True
                    break
                if kk < K:
                    u = vals[p, seg[kk]]
                    kernel(xp, u, k1)
                if kk >= 1:
                    disp = dist(xp, anchor_x[p], scale, ext, per)
                    lb = anchor_v[p] - disp
                    ub = anchor_v[p] + disp
                    dev = r[p] * eL[kk] + eps
                    ts = hx[p] + r[p]
                    tu = hx[p] - r[p]
                    want = False
                    s_ub = ub - dev
                    g = ea[kk] * s_ub if s_ub >= 0 else eb[kk] * s_ub
                    if g >= ts - BOUND_TOL:
                        want = True
                    has_iv = kk < K or K == 1
                    tail = 0.0
                    f_hi = 0.0
                    if has_iv and not fail_u[p]:
                        if kk < K:
                            tail = step_bound(k1, scale, L, eps, dt, grow, Mdt) + r[p] * eL[kk + 1] + eps
                            f_hi = ea[kk + 1]
                        else:
                            tail = r[p] * eL[kk] + eps
                            f_hi = ea[kk]
                        U = lb + tail
                        e = f_hi * U if U >= 0 else eb[kk] * U
                        if e >= tu + BOUND_TOL:
                            fail_u[p] = True
                        else:
                            U = ub + tail
                            e = f_hi * U if U >= 0 else eb[kk] * U
                            if e >= tu - BOUND_TOL:
                                want = True
                    if want:
                        if disp == 0.0:
                            v = anchor_v[p]
                        elif not has_exact[p]:
                            need[p] = True
                            break
                        else:
                            v = exact[p]
                            has_exact[p] = False
                        anchor_v[p] = v
                        for i in range(n):
                            anchor_x[p, i] = xp[i]
                        s = v - dev
                        g = ea[kk] * s if s >= 0 else eb[kk] * s
                        if g >= ts:
                            succ[p] = True
                        if has_iv and not fail_u[p]:
                            U = v + tail
                            e = f_hi * U if U >= 0 else eb[kk] * U
                            if e >= tu:
                                fail_u[p] = True
                    if succ[p] or kk == K:
                        done[p] = True
                        break
                rk4_step(xp, vals[p, seg[kk]], dt, k1, k2, k3, k4, y, lo, ext, per)
                k[p] = kk + 1

    _CACHE[kernel] = (avoid, recur)
    return _CACHE[kernel]
