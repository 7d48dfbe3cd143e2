"""Execution of quasi-uncertain hybrid systems and grid Monte Carlo.

Trajectories are integrated with fixed-step RK4 in physical coordinates.
Guard crossings inside a step are located by bisection on the step length,
and the parameter vector is redrawn after every reset.  All lanes of a
batch advance together, but every operation is elementwise, so a lane's
result never depends on which other lanes share its batch.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .model import TIME, HybridModel, Mode
from .poly import Polynomial
from .relax import LevelSetGrid, grid_points

logger = logging.getLogger(__name__)

_EXIT_TOL = 1e-9
_ON_TOL = 1e-12
_INEQ_TOL = 1e-9


class Termination(str, Enum):
    HORIZON = "HorizonReached"
    LEFT_DOMAIN = "LeftDomain"
    STEP_LIMIT = "StepLimit"


class Direction(str, Enum):
    OUTER_MUST_CONTAIN = "OuterMustContain"
    INNER_MUST_BE_CONTAINED = "InnerMustBeContained"


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimOptions:
    step: float | None = None  # default: horizon / 2000
    event_tol: float = 1e-10
    max_events: int = 10_000
    seed: int = 0
    fixed_theta: tuple[float, ...] | None = None  # bypasses the draws when set

    def __post_init__(self):
        if self.step is not None and not self.step > 0:
            raise SimulationError("integrator step must be positive")
        if not self.event_tol > 0:
            raise SimulationError("event tolerance must be positive")

    def step_for(self, horizon: float) -> float:
        return self.step if self.step is not None else horizon / 2000.0


@dataclass
class Segment:
    mode: int
    theta: np.ndarray
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)


@dataclass
class Event:
    time: float
    edge: int
    pre: np.ndarray
    post: np.ndarray


@dataclass
class Trajectory:
    segments: list[Segment]
    events: list[Event]
    terminal_time: float
    terminal_state: np.ndarray
    terminal_mode: int
    reason: Termination

    def to_csv(self) -> str:
        """One row per sample: t, mode, states and parameters (padded to the widest mode)."""
        nx = max(len(s.states[0]) for s in self.segments if s.states)
        nth = max((len(s.theta) for s in self.segments), default=0)
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "mode", *(f"x{i + 1}" for i in range(nx)), *(f"theta{i + 1}" for i in range(nth))])
        for s in self.segments:
            for t, x in zip(s.times, s.states):
                xs = [f"{v:.12g}" for v in x] + [""] * (nx - len(x))
                ths = [f"{v:.12g}" for v in s.theta] + [""] * (nth - len(s.theta))
                wr.writerow([f"{t:.12g}", s.mode, *xs, *ths])
        return buf.getvalue()


class _Fast:
    """Polynomial compiled for repeated evaluation on lane arrays."""

    def __init__(self, p: Polynomial, names: Sequence[str]):
        col = {n: k for k, n in enumerate(names)}
        self.terms = []
        for e, c in p.sorted_terms():
            factors = [(col[p.space.names[i]], k) for i, k in enumerate(e) if k]
            self.terms.append((float(c), factors))

    def __call__(self, V: np.ndarray) -> np.ndarray:
        out = np.zeros(V.shape[0])
        for c, factors in self.terms:
            t = np.full(V.shape[0], c)
            for j, k in factors:
                t = t * (V[:, j] if k == 1 else V[:, j] ** k)
            out = out + t
        return out


@dataclass
class _Guard:
    edge: int
    dest: int
    eqs: list[_Fast]
    ineqs: list[_Fast]
    reset: list[_Fast]


class _ModeFns:
    def __init__(self, model: HybridModel, mode: Mode):
        self.mode = mode
        self.names = [TIME, *mode.states, *mode.theta_vars]
        self.n = mode.n
        self.k = len(mode.theta_vars)
        self.f = [_Fast(p, self.names) for p in mode.dynamics]
        box = mode.box_array()
        self.lo, self.hi = box[:, 0], box[:, 1]
        self.c = (self.hi - self.lo) / 2.0
        self.m = (self.hi + self.lo) / 2.0
        th = mode.theta_box_array()
        self.th_lo, self.th_hi = (th[:, 0], th[:, 1]) if self.k else (np.zeros(0), np.zeros(0))
        self.domain = [_Fast(h, self.names) for h in mode.domain_ineqs]
        self.guards = [_Guard(k, e.dest, [_Fast(g, self.names) for g in e.guard.eqs],
                              [_Fast(h, self.names) for h in e.guard.ineqs],
                              [_Fast(r, self.names) for r in e.reset])
                       for k, e in model.edges_from(mode.id)]
        # target plus sup-norm slack: h(x) + eps * ||grad_xhat h||_1 >= 0
        self.target = None
        if mode.target is not None:
            self.target = []
            for h in mode.target:
                grads = [_Fast(h.diff(s) * float(ci), self.names) for s, ci in zip(mode.states, self.c)]
                self.target.append((_Fast(h, self.names), grads))

    def pack(self, X: np.ndarray, TH: np.ndarray) -> np.ndarray:
        return np.column_stack([np.zeros(len(X)), X[:, :self.n], TH[:, :self.k]])

    def rhs(self, X: np.ndarray, TH: np.ndarray) -> np.ndarray:
        V = self.pack(X, TH)
        return np.column_stack([f(V) for f in self.f])

    def rk4(self, X: np.ndarray, TH: np.ndarray, dt: np.ndarray) -> np.ndarray:
        d = dt[:, None]
        k1 = self.rhs(X, TH)
        k2 = self.rhs(X + 0.5 * d * k1, TH)
        k3 = self.rhs(X + 0.5 * d * k2, TH)
        k4 = self.rhs(X + d * k3, TH)
        return X + d / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def outside(self, X: np.ndarray, TH: np.ndarray) -> np.ndarray:
        xh = (X[:, :self.n] - self.m) / self.c
        out = np.any(np.abs(xh) > 1.0 + _EXIT_TOL, axis=1)
        if self.domain:
            V = self.pack(X, TH)
            for h in self.domain:
                out |= h(V) < -_EXIT_TOL
        return out

    def near_target(self, X: np.ndarray, TH: np.ndarray, eps: float) -> np.ndarray:
        if self.target is None:
            return np.zeros(len(X), dtype=bool)
        V = self.pack(X, TH)
        ok = np.ones(len(X), dtype=bool)
        for h, grads in self.target:
            slack = sum((np.abs(g(V)) for g in grads), np.zeros(len(X)))
            ok &= h(V) + eps * slack >= 0.0
        return ok

    def in_guard_ineqs(self, g: _Guard, V: np.ndarray) -> np.ndarray:
        ok = np.ones(V.shape[0], dtype=bool)
        for h in g.ineqs:
            ok &= h(V) >= -_INEQ_TOL
        return ok

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.th_lo + (self.th_hi - self.th_lo) * rng.random(self.k)


@dataclass
class _Result:
    t: np.ndarray
    X: np.ndarray
    TH: np.ndarray
    mode: np.ndarray
    reason: list[Termination]
    hit: np.ndarray
    events: np.ndarray


class _Engine:
    def __init__(self, model: HybridModel, opts: SimOptions):
        self.model = model
        self.opts = opts
        self.fns = {m.id: _ModeFns(model, m) for m in model.modes}
        self.nx = max(m.n for m in model.modes)
        self.nth = max((len(m.theta_vars) for m in model.modes), default=0)
        self.h = opts.step_for(model.horizon)

    def _theta(self, mode_id: int, rng: np.random.Generator) -> np.ndarray:
        fn = self.fns[mode_id]
        if self.opts.fixed_theta is not None:
            th = np.asarray(self.opts.fixed_theta, dtype=float)
            if len(th) != fn.k:
                raise SimulationError(f"fixed theta has {len(th)} entries, mode {mode_id} needs {fn.k}")
            return th
        return fn.draw(rng)

    def run(self, modes0: Sequence[int], X0: np.ndarray, rngs: Sequence[np.random.Generator],
            eps: float = 0.0, record: bool = False):
        T = self.model.horizon
        L = len(modes0)
        mode = np.array(modes0, dtype=np.int64)
        X = np.zeros((L, self.nx))
        TH = np.zeros((L, self.nth))
        for i, (mid, x) in enumerate(zip(mode, X0)):
            fn = self.fns[int(mid)]
            x = np.asarray(x, dtype=float)
            if len(x) != fn.n:
                raise SimulationError(f"initial state has {len(x)} entries, mode {mid} has {fn.n} states")
            X[i, :fn.n] = x
            TH[i, :fn.k] = self._theta(int(mid), rngs[i])
        t = np.zeros(L)
        active = np.ones(L, dtype=bool)
        reason: list[Termination] = [Termination.HORIZON] * L
        hit = np.zeros(L, dtype=bool)
        n_events = np.zeros(L, dtype=np.int64)
        rec = None
        if record:
            rec = [([Segment(int(mode[i]), TH[i, :self.fns[int(mode[i])].k].copy(), [0.0],
                             [X[i, :self.fns[int(mode[i])].n].copy()])], []) for i in range(L)]

        for mid, fn in self.fns.items():
            sel = np.flatnonzero(mode == mid)
            if len(sel):
                hit[sel] |= fn.near_target(X[sel], TH[sel], eps)
                bad = fn.outside(X[sel], TH[sel])
                for i in sel[bad]:
                    active[i] = False
                    reason[i] = Termination.LEFT_DOMAIN

        while True:
            done = active & (T - t <= 1e-13 * max(T, 1.0))
            t[done] = T
            active &= ~done
            if not active.any():
                break
            for mid, fn in self.fns.items():
                sel = np.flatnonzero(active & (mode == mid))
                if not len(sel):
                    continue
                self._advance(fn, sel, t, X, TH, mode, active, reason, hit, n_events, rngs, eps, rec)

        if rec is not None:
            for i in range(L):
                segs = rec[i][0]
                if segs[-1].times[-1] != t[i]:
                    segs[-1].times.append(float(t[i]))
                    segs[-1].states.append(X[i, :self.fns[int(mode[i])].n].copy())
        return _Result(t, X, TH, mode, reason, hit, n_events), rec

    def _advance(self, fn: _ModeFns, sel, t, X, TH, mode, active, reason, hit, n_events, rngs, eps, rec):
        T = self.model.horizon
        x0, th = X[sel], TH[sel]
        dt = np.minimum(self.h, T - t[sel])
        x1 = fn.rk4(x0, th, dt)
        V0, V1 = fn.pack(x0, th), fn.pack(x1, th)

        # candidate events: (time within step, guard index)
        best_tau = np.full(len(sel), np.inf)
        best_g = np.full(len(sel), -1)
        best_x = np.zeros_like(x0)
        leaving = None
        for gi, g in enumerate(fn.guards):
            on = np.zeros(len(sel), dtype=bool)
            if g.eqs:
                g0, g1 = g.eqs[0](V0), g.eqs[0](V1)
                cand = ((g0 * g1 < 0) | ((g1 == 0) & (g0 != 0)))
                # already on the surface and the flow would exit: jump now
                if leaving is None:
                    leaving = fn.outside(x1, th)
                on = (np.abs(g0) <= _ON_TOL) & leaving & ~cand
                cand |= on
            else:
                cand = ~fn.in_guard_ineqs(g, V0) & fn.in_guard_ineqs(g, V1)
            idx = np.flatnonzero(cand)
            if not len(idx):
                continue
            tau, xe = self._bisect(fn, g, x0[idx], th[idx], dt[idx])
            at0 = on[idx]
            tau[at0] = 0.0
            xe[at0] = x0[idx][at0]
            Ve = fn.pack(xe, th[idx])
            ok = fn.in_guard_ineqs(g, Ve)
            for other in g.eqs[1:]:
                ok &= np.abs(other(Ve)) <= 1e-6
            for j, k in enumerate(idx):
                if not ok[j]:
                    continue
                if tau[j] < best_tau[k] - self.opts.event_tol:
                    best_tau[k], best_g[k], best_x[k] = tau[j], gi, xe[j]
                elif abs(tau[j] - best_tau[k]) <= self.opts.event_tol:
                    logger.warning("simultaneous guard hits at t=%.12g; lowest edge index wins", t[sel[k]] + tau[j])

        ev = best_g >= 0
        # plain steps
        plain = sel[~ev]
        # a step clipped to the horizon lands on it exactly
        t[plain] = np.where(dt[~ev] >= T - t[plain], T, t[plain] + dt[~ev])
        X[plain] = x1[~ev]
        if len(plain):
            hit[plain] |= fn.near_target(X[plain], TH[plain], eps)
            out = fn.outside(X[plain], TH[plain])
            for i in plain[out]:
                active[i] = False
                reason[i] = Termination.LEFT_DOMAIN
            if rec is not None:
                for i in plain:
                    rec[i][0][-1].times.append(float(t[i]))
                    rec[i][0][-1].states.append(X[i, :fn.n].copy())

        # events
        for k in np.flatnonzero(ev):
            i = sel[k]
            g = fn.guards[best_g[k]]
            pre = best_x[k]
            Vp = fn.pack(pre[None, :], th[k][None, :])
            if fn.outside(pre[None, :], th[k][None, :])[0]:
                t[i] += best_tau[k]
                X[i] = pre
                active[i] = False
                reason[i] = Termination.LEFT_DOMAIN
                continue
            post = np.array([r(Vp)[0] for r in g.reset])
            t[i] += best_tau[k]
            n_events[i] += 1
            dest = self.fns[g.dest]
            if rec is not None:
                seg = rec[i][0][-1]
                seg.times.append(float(t[i]))
                seg.states.append(pre[:fn.n].copy())
                rec[i][1].append(Event(float(t[i]), g.edge, pre[:fn.n].copy(), post.copy()))
            mode[i] = g.dest
            X[i] = 0.0
            X[i, :dest.n] = post
            TH[i] = 0.0
            TH[i, :dest.k] = self._theta(g.dest, rngs[i])
            if rec is not None:
                rec[i][0].append(Segment(g.dest, TH[i, :dest.k].copy(), [float(t[i])], [post.copy()]))
            if n_events[i] > self.opts.max_events:
                active[i] = False
                reason[i] = Termination.STEP_LIMIT
                continue
            if dest.outside(X[i:i + 1], TH[i:i + 1])[0]:
                active[i] = False
                reason[i] = Termination.LEFT_DOMAIN
                continue
            hit[i] |= dest.near_target(X[i:i + 1], TH[i:i + 1], eps)[0]

    def _bisect(self, fn: _ModeFns, g: _Guard, x0, th, dt):
        """Smallest step (to tolerance) at which the guard has been reached."""
        lo = np.zeros(len(x0))
        hi = dt.copy()
        if g.eqs:
            s0 = np.sign(g.eqs[0](fn.pack(x0, th)))

            def reached(xs):
                v = g.eqs[0](fn.pack(xs, th))
                return (np.sign(v) != s0) | (v == 0)
        else:
            def reached(xs):
                return fn.in_guard_ineqs(g, fn.pack(xs, th))
        while np.max(hi - lo) > self.opts.event_tol:
            mid = 0.5 * (lo + hi)
            r = reached(fn.rk4(x0, th, mid))
            hi = np.where(r, mid, hi)
            lo = np.where(r, lo, mid)
        return hi, fn.rk4(x0, th, hi)


def integrate_segment(model: HybridModel, mode_id: int, x0: Sequence[float], theta: Sequence[float],
                      t0: float = 0.0, options: SimOptions | None = None) -> tuple[Segment, Event | None, Termination | None]:
    """Flow in one mode until the first guard event, domain exit, or the horizon.

    Returns the segment, the event (if a guard was hit) and a termination
    reason when the segment ends without an event.
    """
    opts = options or SimOptions()
    fixed = SimOptions(opts.step, opts.event_tol, 0, opts.seed, tuple(float(v) for v in theta))
    shifted = HybridModel(model.name, model.horizon - t0, model.modes, model.edges, model.description)
    eng = _Engine(shifted, fixed)
    eng.h = opts.step_for(model.horizon)
    res, rec = eng.run([mode_id], np.asarray([x0], dtype=float), [np.random.default_rng(0)], record=True)
    segs, events = rec[0]
    seg = segs[0]
    seg.times = [t0 + s for s in seg.times]
    if events:
        e = events[0]
        return seg, Event(t0 + e.time, e.edge, e.pre, e.post), None
    return seg, None, res.reason[0]


def execute(model: HybridModel, mode_id: int, x0: Sequence[float], seed: int | None = None,
            options: SimOptions | None = None) -> Trajectory:
    opts = options or SimOptions()
    rng = np.random.default_rng(np.random.SeedSequence(opts.seed if seed is None else seed))
    eng = _Engine(model, opts)
    res, rec = eng.run([mode_id], np.asarray([x0], dtype=float), [rng], record=True)
    segs, events = rec[0]
    n = eng.fns[int(res.mode[0])].n
    return Trajectory(segs, events, float(res.t[0]), res.X[0, :n].copy(), int(res.mode[0]), res.reason[0])


@dataclass
class McReport:
    mode: int
    names: tuple[str, ...]
    axes: list[np.ndarray]
    points: np.ndarray
    trials: np.ndarray
    successes: np.ndarray
    eps: float
    any_time: bool
    seed: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow([*self.names, "trials", "successes"])
        for p, n, s in zip(self.points, self.trials, self.successes):
            wr.writerow([*(f"{x:.9g}" for x in p), int(n), int(s)])
        return buf.getvalue()

    @property
    def all_success(self) -> np.ndarray:
        return self.successes == self.trials


def _thread_cap() -> int:
    raw = os.environ.get("UBRS_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, min(cap, int(raw)))
        except ValueError:
            logger.warning("ignoring malformed UBRS_THREADS=%r", raw)
    return cap


def monte_carlo(model: HybridModel, mode_id: int, n: int | Sequence[int] = 51, trials: int = 100,
                eps: float = 1e-3, seed: int = 0, any_time: bool = False, options: SimOptions | None = None,
                axes: Sequence[np.ndarray] | None = None, chunk: int = 4096) -> McReport:
    """Per grid point, run `trials` executions and count successes.

    Success means the horizon was reached without leaving the domain and the
    terminal state is within `eps` (sup-norm, normalized coordinates) of the
    terminal mode's target.  With `any_time` the target may be met at any
    sample time instead.
    """
    if trials < 1:
        raise SimulationError("trials must be at least 1")
    opts = options or SimOptions()
    mode = model.mode(mode_id)
    if axes is None:
        axes, pts = grid_points(mode.box_array(), n)
    else:
        axes = [np.asarray(a, dtype=float) for a in axes]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
    P = len(pts)
    lane_pt = np.repeat(np.arange(P), trials)
    lane_tr = np.tile(np.arange(trials), P)
    X0 = pts[lane_pt]

    def run_chunk(lo: int, hi: int) -> np.ndarray:
        rngs = [np.random.default_rng(np.random.SeedSequence([seed, int(p), int(k)]))
                for p, k in zip(lane_pt[lo:hi], lane_tr[lo:hi])]
        eng = _Engine(model, opts)
        res, _ = eng.run([mode_id] * (hi - lo), X0[lo:hi], rngs, eps=eps)
        if any_time:
            return res.hit.copy()
        ok = np.array([r == Termination.HORIZON for r in res.reason])
        term = np.zeros(hi - lo, dtype=bool)
        for mid, fn in eng.fns.items():
            sel = np.flatnonzero(res.mode == mid)
            if len(sel):
                term[sel] = fn.near_target(res.X[sel], res.TH[sel], eps)
        return ok & term

    bounds = [(s, min(s + chunk, len(lane_pt))) for s in range(0, len(lane_pt), chunk)]
    workers = min(_thread_cap(), len(bounds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda b: run_chunk(*b), bounds))
    else:
        parts = [run_chunk(*b) for b in bounds]
    ok = np.concatenate(parts) if parts else np.zeros(0, dtype=bool)
    succ = np.bincount(lane_pt[ok], minlength=P)
    return McReport(mode_id, tuple(mode.states), list(axes), pts, np.full(P, trials), succ, eps, any_time, seed)


@dataclass
class ContainmentVerdict:
    direction: Direction
    passed: bool
    checked: int
    violations: list[dict]

    def to_dict(self) -> dict:
        return {"direction": self.direction.value, "passed": self.passed, "checked": self.checked,
                "violations": self.violations}


def check_containment(report: McReport, grid: LevelSetGrid, direction: Direction | str,
                      tol: float = 1e-6) -> ContainmentVerdict:
    """Compare MC successes with a certificate's classification on the same grid.

    Outer: every all-success point needs w >= 1 - tol.  Inner: every point the
    certificate claims must be an all-success point.
    """
    direction = Direction(direction)
    if report.points.shape != grid.points.shape or not np.allclose(report.points, grid.points, atol=1e-12):
        raise SimulationError("grid mismatch between Monte Carlo report and level-set grid")
    full = report.all_success
    if direction == Direction.OUTER_MUST_CONTAIN:
        bad = np.flatnonzero(full & ~(grid.values >= 1.0 - tol))
        checked = int(full.sum())
    else:
        claimed = grid.column("inside")
        bad = np.flatnonzero(claimed & ~full)
        checked = int(claimed.sum())
    viol = [{"index": int(i), "point": [float(v) for v in report.points[i]], "w": float(grid.values[i]),
             "trials": int(report.trials[i]), "successes": int(report.successes[i])} for i in bad]
    return ContainmentVerdict(direction, not viol, checked, viol)
