"""Three-stage region verification with adaptive cell splitting.

Stage 1 over-approximates the unsafe set at time zero, stage 2 removes every
cell that some sampled control cannot keep away from the stage-1 unsafe cells
over the horizon, and stage 3 keeps only cells that robustly satisfy the
recurrence condition for ``h = -sd(., S)`` with ``S`` the current safe union,
repeated until ``S`` stops changing.

A pass hands all pending cells, in id order, to fixed-size chunks. Every
trajectory check is vectorized over (cell, control) rows. Outcomes are
committed at a single-threaded barrier, where split children receive fresh
ids. A cell's result depends only on the cell, its random stream (keyed by
seed, stage and cell id) and the immutable stage snapshot, so the final
partition does not depend on the number of workers.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import conditions as cond
from ._fused import BOUND_TOL, kernels
from .dynamics import VectorField, rk4_batch, sample_control_values, step_controls
from .geometry import PENDING, SAFE, UNSAFE, Cell, Domain, Partition, UnionDistance
from .sets import UnsafeSet

log = logging.getLogger(__name__)

# cells per work unit; fixed so results never depend on the worker count
CHUNK_CELLS = 64
# rows integrated at once inside a chunk
MAX_ROWS = 8192


@dataclass
class VerifierConfig:
    r_min: float
    n_s: int
    n_seg: int
    unsafe_set: UnsafeSet
    params: cond.RcbfParams
    seed: int = 0
    max_stage3_iters: int = 50
    root_radius: float | None = None
    workers: int = 1
    rounds: tuple = (8, 64)
    # compiled integrate-and-check loop when the field has a kernel; same results
    fused: bool = True

    def __post_init__(self):
        if not self.r_min > 0:
            raise ValueError("r_min must be positive")
        if self.n_s < 1 or self.n_seg < 1:
            raise ValueError("n_s and n_seg must be positive")
        if self.max_stage3_iters < 1:
            raise ValueError("stage-3 iteration cap must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        if self.params.tau > 0:
            seg = self.params.tau / self.n_seg
            if abs(seg / self.params.dt - round(seg / self.params.dt)) > 1e-9:
                raise ValueError("control segments must align with the integration grid")

    def to_json(self) -> dict:
        return {
            "r_min": self.r_min, "n_s": self.n_s, "n_seg": self.n_seg, "seed": self.seed,
            "max_stage3_iters": self.max_stage3_iters, "root_radius": self.root_radius,
            "unsafe_set": self.unsafe_set.to_json(), "params": self.params.to_json(),
        }


@dataclass
class Certificate:
    cell_id: int
    stage: int
    center: list
    radius: float
    signal_seed: int | None = None
    signal_index: int | None = None
    signal_segments: list | None = None

    def to_json(self) -> dict:
        return {
            "cell_id": self.cell_id, "stage": self.stage, "center": self.center, "radius": self.radius,
            "signal_seed": self.signal_seed, "signal_index": self.signal_index,
            "signal_segments": self.signal_segments,
        }


@dataclass
class StageReport:
    stage: int
    examined: int = 0
    split: int = 0
    safe: int = 0
    unsafe: int = 0
    floor_unsafe: int = 0
    trajectories: int = 0
    safe_volume: float = 0.0
    unsafe_volume: float = 0.0
    wall_time: float = 0.0
    iterations: int = 1
    passes: int = 0
    workers: int = 1
    cap_hit: bool = False

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Outcome:
    cell_id: int
    result: str
    witness: int | None = None
    signal_seed: int | None = None
    trajectories: int = 0


@dataclass
class StageContext:
    """Immutable per-pass snapshot shared by all cells of a pass."""

    stage: int
    field: VectorField
    domain: Domain
    params: cond.RcbfParams
    cfg: VerifierConfig
    unsafe_set: UnsafeSet | None = None
    ref: UnionDistance | None = None

    def sd(self, points: np.ndarray) -> np.ndarray:
        if self.stage == 1:
            return self.unsafe_set.signed_distance(points, self.domain)
        return self.ref(points)


def cell_seed(seed: int, stage: int, cell_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(stage), int(cell_id)]).generate_state(1)[0])


def cell_signals(field: VectorField, cfg: VerifierConfig, stage: int, cell_id: int) -> tuple[int, np.ndarray]:
    s = cell_seed(cfg.seed, stage, cell_id)
    return s, sample_control_values(field, cfg.n_s, cfg.n_seg, s)


def _round_bounds(n_s: int, rounds: tuple) -> list[tuple[int, int]]:
    edges = [0] + [b for b in rounds if 0 < b < n_s] + [n_s]
    return list(zip(edges[:-1], edges[1:]))


def _step_bounds(ctx: StageContext, rates: np.ndarray) -> np.ndarray:
    """Per-step bound on how far the exact flow moves in scaled norm: ``(R, K)``.

    Over one step the true trajectory stays within ``(|F_k| + L eps)(e^{L dt} - 1)/L``
    of the grid state (Gronwall), and never farther than ``M dt``.
    """
    p = ctx.params
    speed = ctx.domain.norm(rates) + p.L * p.eps_int
    L, dt = p.L, p.dt
    grow = dt if L == 0 else np.expm1(L * dt) / L
    return np.minimum(speed * grow, p.M * dt)


def _avoid_rows(ctx, states, esc, steps, r, sd0):
    """Stage-2 row checks. Returns (robust-safe, reaches-unsafe) flags per row.

    Exact distances are only computed where the 1-Lipschitz bound from the last
    exact evaluation cannot decide the inequality, so the flags equal those of
    a full evaluation.
    """
    p = ctx.params
    R, K1, _ = states.shape
    K = K1 - 1
    t = p.times
    e_next = np.exp(p.L * np.append(t[1:], t[-1]))
    e_now = np.exp(p.L * t)
    anchor_v = sd0.copy()
    anchor_x = states[:, 0].copy()
    step0 = steps[:, 0] if K else 0.0
    alive = (esc > 0) & (sd0 - step0 > r * e_next[0] + p.eps_int)
    satu = (esc > 0) & (sd0 < -(r * e_now[0] + p.eps_int))
    act = np.flatnonzero(alive | ~satu)
    for k in range(1, K + 1):
        ok = esc[act] > k
        alive[act] &= ok
        act = act[ok & (alive[act] | ~satu[act])]
        if act.size == 0:
            break
        x = states[act, k]
        ra = r[act]
        disp = ctx.domain.dist(x, anchor_x[act])
        av = anchor_v[act]
        lb = av - disp
        ub = av + disp
        stp = steps[act, k] if k < K else 0.0
        ts = ra * e_next[k] + p.eps_int
        tu = -(ra * e_now[k] + p.eps_int)
        al = alive[act]
        su = satu[act] | (ub < tu - BOUND_TOL)
        need = (al & (lb - stp <= ts + BOUND_TOL)) | (~su & (lb < tu + BOUND_TOL))
        if need.any():
            rows = act[need]
            v = ctx.sd(x[need])
            anchor_v[rows] = v
            anchor_x[rows] = x[need]
            stp_n = stp[need] if k < K else 0.0
            al[need] &= v - stp_n > ts[need]
            su[need] |= v < tu[need]
        alive[act] = al
        satu[act] = su
    return alive, satu


def _grow(s, t, alpha, beta):
    return np.exp(np.where(s >= 0, alpha, beta) * t) * s


def _recur_rows(ctx, states, esc, steps, r, hx):
    """Stage-3 row checks with ``h = -sd(., S)``. Returns (robust-recurrent, nonrecurrent) flags.

    On ``[t_k, t_{k+1}]`` the nonrecurrence envelope is bounded by
    ``U_k = h_k + step_k + r e^{L t_{k+1}} + eps``; the open interval before
    the first grid time is not part of the check.
    """
    p = ctx.params
    R, K1, _ = states.shape
    K = K1 - 1
    t = p.times
    a, b = p.alpha, p.beta
    anchor_v = hx.copy()
    anchor_x = states[:, 0].copy()
    succ = np.zeros(R, dtype=bool)
    fail_u = np.zeros(R, dtype=bool)
    act = np.arange(R)
    for k in range(1, K + 1):
        act = act[(esc[act] > k) & ~(succ[act] & fail_u[act])]
        if act.size == 0:
            break
        tk = t[k]
        x = states[act, k]
        ra = r[act]
        disp = ctx.domain.dist(x, anchor_x[act])
        av = anchor_v[act]
        lb = av - disp
        ub = av + disp
        dev = ra * np.exp(p.L * tk) + p.eps_int
        ts = hx[act] + ra
        tu = hx[act] - ra
        sc = succ[act]
        fu = fail_u[act]
        cand_s = ~sc & (_grow(ub - dev, tk, a, b) >= ts - BOUND_TOL)
        has_interval = k < K or K == 1
        if has_interval:
            t_hi = t[k + 1] if k < K else tk
            tail = (steps[act, k] if k < K else 0.0) + ra * np.exp(p.L * t_hi) + p.eps_int
            fu |= _env_at(lb, tail, t_hi, tk, a, b) >= tu + BOUND_TOL
            need_u = ~fu & (_env_at(ub, tail, t_hi, tk, a, b) >= tu - BOUND_TOL)
        else:
            need_u = np.zeros(act.size, dtype=bool)
        need = cand_s | need_u
        if need.any():
            rows = act[need]
            v = -ctx.sd(x[need])
            anchor_v[rows] = v
            anchor_x[rows] = x[need]
            sc[need] |= _grow(v - dev[need], tk, a, b) >= ts[need]
            if has_interval:
                fu[need] |= _env_at(v, tail[need], t_hi, tk, a, b) >= tu[need]
        succ[act] = sc
        fail_u[act] = fu
    return succ, ~fail_u


def _env_at(h, tail, t_hi, t_lo, a, b):
    U = h + tail
    return np.where(U >= 0, np.exp(a * t_hi) * U, np.exp(b * t_lo) * U)


def _stage1_chunk(cells: list[Cell], ctx: StageContext) -> list[Outcome]:
    centers = np.array([c.center for c in cells])
    r = np.array([c.radius for c in cells])
    sd = ctx.sd(centers)
    out = []
    for c, s, ri in zip(cells, sd, r):
        traj = np.array([s])
        if cond.check_inside_brt(traj[None], ri, ctx.params):
            out.append(Outcome(c.id, UNSAFE))
        elif cond.check_outside_brt(traj, ri, ctx.params):
            out.append(Outcome(c.id, SAFE))
        else:
            out.append(Outcome(c.id, "split"))
    return out


def _rows(ctx, x0, vals, seg_of_step, r, base, track_u):
    """Per-row (safe-side, unsafe-side) flags for one batch of (center, control) rows."""
    fld, p = ctx.field, ctx.params
    if fld.kernel is not None and ctx.cfg.fused:
        return _rows_fused(ctx, x0, vals, seg_of_step, r, base, track_u)
    controls = vals[:, seg_of_step, :]
    states, esc, rates = rk4_batch(fld, x0, controls, p.dt, ctx.domain, return_rates=True)
    steps = _step_bounds(ctx, rates)
    if ctx.stage == 2:
        return _avoid_rows(ctx, states, esc, steps, r, base)
    return _recur_rows(ctx, states, esc, steps, r, -base)


def _rows_fused(ctx, x0, vals, seg_of_step, r, base, track_u):
    avoid, recur = kernels(ctx.field.kernel)
    p, dom, fld = ctx.params, ctx.domain, ctx.field
    R, n = x0.shape
    x = np.ascontiguousarray(x0, dtype=float).copy()
    k = np.zeros(R, dtype=np.int64)
    anchor_x = x.copy()
    done = np.zeros(R, dtype=bool)
    need = np.zeros(R, dtype=bool)
    exact = np.zeros(R)
    has_exact = np.zeros(R, dtype=bool)
    t = p.times
    L, dt = p.L, p.dt
    grow = dt if L == 0 else float(np.expm1(L * dt) / L)
    per = dom.periodic_mask.copy()
    if fld.box is not None:
        box_lo, box_hi = (np.asarray(b, dtype=float) for b in fld.box)
    else:
        box_lo, box_hi = np.full(n, -np.inf), np.full(n, np.inf)
    geom = (dom.scale, dom.lower.astype(float), dom.extent.astype(float), per, box_lo, box_hi)
    seg = np.ascontiguousarray(seg_of_step, dtype=np.int64)
    vals = np.ascontiguousarray(vals)
    if ctx.stage == 2:
        anchor_v = base.astype(float).copy()
        good = np.ones(R, dtype=bool)
        bad = np.zeros(R, dtype=bool)
        e_next = np.exp(L * np.append(t[1:], t[-1]))
        e_now = np.exp(L * t)
        track = np.ascontiguousarray(track_u, dtype=bool)

        def run():
            avoid(x, k, vals, seg, dt, r, anchor_v, anchor_x, good, bad, track, done, need, exact, has_exact,
                  e_next, e_now, p.eps_int, L, grow, p.M * dt, *geom)
    else:
        hx = -base.astype(float)
        anchor_v = hx.copy()
        good = np.zeros(R, dtype=bool)
        fail_u = np.zeros(R, dtype=bool)
        eL = np.exp(L * t)
        ea = np.exp(p.alpha * t)
        eb = np.exp(p.beta * t)

        def run():
            recur(x, k, vals, seg, dt, r, hx, anchor_v, anchor_x, good, fail_u, done, need, exact, has_exact,
                  eL, ea, eb, p.alpha, p.beta, p.eps_int, L, grow, p.M * dt, *geom)
    while True:
        run()
        idx = np.flatnonzero(need)
        if idx.size == 0:
            break
        v = ctx.sd(x[idx])
        exact[idx] = -v if ctx.stage == 3 else v
        has_exact[idx] = True
    if ctx.stage == 2:
        return good, bad
    return good, ~fail_u


def _trajectory_chunk(cells: list[Cell], ctx: StageContext) -> list[Outcome]:
    cfg, p, fld = ctx.cfg, ctx.params, ctx.field
    K = p.steps
    bp = p.tau * np.arange(1, cfg.n_seg + 1) / cfg.n_seg
    seg_of_step = step_controls(None, bp, p.dt, K)
    centers = np.array([c.center for c in cells])
    radii = np.array([c.radius for c in cells])
    base = ctx.sd(centers)  # sd to the unsafe reference (stage 2) or to S (stage 3)
    seeds, signals = zip(*(cell_signals(fld, cfg, ctx.stage, c.id) for c in cells))
    n = len(cells)
    result = [None] * n
    witness = [None] * n
    all_u = np.ones(n, dtype=bool)
    used = np.zeros(n, dtype=int)
    for lo, hi in _round_bounds(cfg.n_s, cfg.rounds):
        open_cells = [i for i in range(n) if result[i] is None]
        if not open_cells:
            break
        per = hi - lo
        cells_per_batch = max(1, MAX_ROWS // per)
        for start in range(0, len(open_cells), cells_per_batch):
            batch = open_cells[start:start + cells_per_batch]
            ci = np.repeat(batch, per)
            vals = np.concatenate([signals[i][lo:hi] for i in batch])  # (R, n_seg, m)
            good, bad = _rows(ctx, centers[ci], vals, seg_of_step, radii[ci], base[ci], all_u[ci])
            good = good.reshape(len(batch), per)
            bad = bad.reshape(len(batch), per)
            for j, i in enumerate(batch):
                used[i] = hi
                if good[j].any():
                    result[i] = SAFE
                    witness[i] = lo + int(np.argmax(good[j]))
                elif not bad[j].all():
                    all_u[i] = False
        for i in open_cells:
            if result[i] is None and hi == cfg.n_s:
                result[i] = UNSAFE if all_u[i] else "split"
    return [
        Outcome(c.id, result[i], witness[i], seeds[i] if witness[i] is not None else None, int(used[i]))
        for i, c in enumerate(cells)
    ]


def safety_check(cell: Cell, ctx: StageContext) -> Outcome:
    """Classify one cell as safe, unsafe or to-be-split (before the resolution floor)."""
    if ctx.stage == 1:
        return _stage1_chunk([cell], ctx)[0]
    return _trajectory_chunk([cell], ctx)[0]


def _run_chunk(cells: list[Cell]) -> list[Outcome]:
    ctx = _CTX
    if ctx.stage == 1:
        return _stage1_chunk(cells, ctx)
    return _trajectory_chunk(cells, ctx)


_CTX: StageContext | None = None


def evaluate_cells(cells: list[Cell], ctx: StageContext, workers: int = 1) -> list[Outcome]:
    global _CTX
    chunks = [cells[i:i + CHUNK_CELLS] for i in range(0, len(cells), CHUNK_CELLS)]
    _CTX = ctx
    try:
        if workers <= 1 or len(chunks) <= 1:
            results = [_run_chunk(ch) for ch in chunks]
        else:
            with mp.get_context("fork").Pool(workers) as pool:
                results = pool.map(_run_chunk, chunks, chunksize=1)
    finally:
        _CTX = None
    return [o for rs in results for o in rs]


def verify_cells(
    partition: Partition,
    ctx: StageContext,
    report: StageReport,
    certificates: dict,
) -> Partition:
    """Drain the pending cells: check, commit, split, repeat until none are pending."""
    r_min = ctx.cfg.r_min
    while True:
        pending = partition.pending
        if not pending:
            break
        report.passes += 1
        outcomes = evaluate_cells(pending, ctx, ctx.cfg.workers)
        for o in sorted(outcomes, key=lambda o: o.cell_id):
            cell = partition.cells[o.cell_id]
            report.examined += 1
            report.trajectories += o.trajectories
            if o.result == SAFE:
                partition.relabel(o.cell_id, SAFE)
                certificates.setdefault(o.cell_id, []).append(_certificate(cell, o, ctx))
                report.safe += 1
            elif o.result == UNSAFE:
                partition.relabel(o.cell_id, UNSAFE)
                certificates.pop(o.cell_id, None)
                report.unsafe += 1
            elif cell.radius / 3.0 >= r_min * (1 - 1e-9):
                inherited = certificates.pop(o.cell_id, [])
                for child in partition.split(o.cell_id):
                    if inherited:
                        certificates[child.id] = list(inherited)
                report.split += 1
            else:
                partition.relabel(o.cell_id, UNSAFE)
                certificates.pop(o.cell_id, None)
                report.unsafe += 1
                report.floor_unsafe += 1
    return partition


def _certificate(cell: Cell, o: Outcome, ctx: StageContext) -> Certificate:
    cert = Certificate(cell_id=cell.id, stage=ctx.stage, center=cell.center.tolist(), radius=cell.radius)
    if o.witness is not None:
        _, vals = cell_signals(ctx.field, ctx.cfg, ctx.stage, cell.id)
        cert.signal_seed = o.signal_seed
        cert.signal_index = o.witness
        cert.signal_segments = vals[o.witness].tolist()
    return cert


def _finish(report: StageReport, partition: Partition, t0: float) -> StageReport:
    report.safe_volume = partition.volume(SAFE)
    report.unsafe_volume = partition.volume(UNSAFE)
    report.wall_time = time.perf_counter() - t0
    return report


def _reopen_safe(partition: Partition) -> None:
    for c in partition.safe:
        partition.relabel(c.id, PENDING)


def stage3_fixed_point(
    partition: Partition, field: VectorField, cfg: VerifierConfig, certificates: dict, report: StageReport
) -> tuple[Partition, int]:
    """Re-run the recurrence pass against the current safe union until it stops shrinking."""
    iterations = 0
    changed = False
    while iterations < cfg.max_stage3_iters:
        iterations += 1
        safe, unsafe = partition.safe, partition.unsafe
        if not safe:
            changed = False
            break
        ref = UnionDistance(safe, unsafe, partition.domain)
        ctx = StageContext(3, field, partition.domain, cfg.params, cfg, ref=ref)
        before = report.unsafe
        _reopen_safe(partition)
        # stage-3 certificates are only valid against the latest snapshot
        for cid in list(certificates):
            certificates[cid] = [c for c in certificates[cid] if c.stage != 3]
        verify_cells(partition, ctx, report, certificates)
        changed = report.unsafe > before
        log.info("stage 3 iteration %d: %d unsafe so far", iterations, report.unsafe)
        if not changed:
            break
    if changed:
        report.cap_hit = True
        for c in partition.safe:
            partition.relabel(c.id, UNSAFE)
            certificates.pop(c.id, None)
    report.iterations = iterations
    return partition, iterations


@dataclass
class VerificationResult:
    partition: Partition
    reports: list
    certificates: dict = field(default_factory=dict)


def verify_region(domain: Domain, field_: VectorField, cfg: VerifierConfig) -> VerificationResult:
    """Run the three stages; every final cell is labeled safe or unsafe."""
    part = Partition.from_domain(domain, cfg.root_radius)
    certificates: dict = {}
    reports = []

    t0 = time.perf_counter()
    p1 = replace(cfg.params, tau=0.0, eps_int=cfg.params.eps_int)
    ctx1 = StageContext(1, field_, domain, p1, cfg, unsafe_set=cfg.unsafe_set)
    rep = StageReport(1, workers=cfg.workers)
    verify_cells(part, ctx1, rep, certificates)
    reports.append(_finish(rep, part, t0))

    t0 = time.perf_counter()
    rep = StageReport(2, workers=cfg.workers)
    if cfg.params.tau > 0 and part.safe:
        ref = UnionDistance(part.unsafe, part.safe, domain, exterior_member=False)
        ctx2 = StageContext(2, field_, domain, cfg.params, cfg, ref=ref)
        _reopen_safe(part)
        verify_cells(part, ctx2, rep, certificates)
    reports.append(_finish(rep, part, t0))

    t0 = time.perf_counter()
    rep = StageReport(3, workers=cfg.workers, iterations=0)
    if cfg.params.tau > 0 and part.safe:
        stage3_fixed_point(part, field_, cfg, certificates, rep)
    reports.append(_finish(rep, part, t0))

    certificates = {cid: certs for cid, certs in sorted(certificates.items()) if part.cells[cid].label == SAFE}
    return VerificationResult(part, reports, certificates)
