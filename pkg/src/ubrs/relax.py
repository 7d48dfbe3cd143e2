"""SOS relaxations of the occupation-measure dual and certificate handling.

All builders work on the normalized model (boxes [-1, 1], horizon 1).  The
decision variables per mode are w_j(x), v_j(t, x, theta) (v_j(t, x) for the
inner variant) and one shared scalar q.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

import numpy as np

from .model import TIME, HybridModel, Mode, ScalingMap, normalize
from .poly import Polynomial, VarSpace, integrate_uniform, lebesgue_moments, lie_derivative, parse_polynomial
from .sdp import SolverOptions, Status, solve, sos_solution, to_standard_form
from .sos import AffinePolyExpr, DecisionPolynomial, SdpProblem, SosProgram, SosSolution, linear_functional

logger = logging.getLogger(__name__)


class RelaxError(ValueError):
    pass


class Variant(str, Enum):
    OUTER = "outer"
    FREE_TIME = "free-time"
    INNER = "inner"
    ALPHA = "alpha"


@dataclass(frozen=True)
class RelaxOptions:
    degree: int
    variant: Variant = Variant.OUTER
    alpha: float | None = None
    # small trace penalty on all Gram blocks; the reported objective excludes it
    gram_penalty: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.gram_penalty >= 0.0:
            raise RelaxError("gram_penalty must be nonnegative")
        if not isinstance(self.degree, (int, np.integer)) or self.degree < 2 or self.degree % 2:
            raise RelaxError("degree must be even and at least 2")
        if self.variant == Variant.ALPHA:
            if self.alpha is None or not 0.0 < self.alpha <= 1.0:
                raise RelaxError("alpha must lie in (0, 1] for the alpha variant")
        elif self.alpha is not None:
            raise RelaxError("alpha is only meaningful for the alpha variant")


@dataclass
class Relaxation:
    """An assembled SDP together with what is needed to read a certificate back."""

    options: RelaxOptions
    model: HybridModel
    normalized: HybridModel
    scaling: ScalingMap
    problem: SdpProblem
    w: dict[int, DecisionPolynomial]
    v: dict[int, DecisionPolynomial]
    q: DecisionPolynomial


# -- helpers ---------------------------------------------------------------------

def _unit(p: Polynomial) -> Polynomial:
    """Rescale a set-defining polynomial so its largest coefficient is 1 (same set)."""
    mx = p.max_abs_coeff()
    return p if mx == 0 else p.scale(1.0 / mx)


def _box_ineqs(mode: Mode, space: VarSpace, with_theta: bool, with_time: bool) -> list[Polynomial]:
    out = []
    if with_time:
        t = Polynomial.var(space, TIME)
        out.append(t * (1 - t))
    for name in mode.states:
        x = Polynomial.var(space, name)
        out.append(1 - x * x)
    if with_theta:
        for name in mode.theta_vars:
            th = Polynomial.var(space, name)
            out.append(1 - th * th)
    return out


def _domain(mode: Mode, allow_theta: bool) -> list[Polynomial]:
    out = []
    for h in mode.domain_ineqs:
        if not allow_theta and set(h.used_vars()) & set(mode.theta_vars):
            continue
        out.append(_unit(h))
    return out


def _v_degree(model: HybridModel, mode: Mode, d: int) -> int:
    df = max([f.degree() for f in mode.dynamics] + [1])
    deg = d - df + 1
    for e in model.edges:
        if e.dest == mode.id:
            dr = max([r.degree() for r in e.reset] + [1])
            deg = min(deg, d // dr)
    return min(deg, d)


def _check_degrees(model: HybridModel, d: int) -> None:
    for m in model.modes:
        sets = [*m.domain_ineqs, *(m.target or ())]
        for h in sets:
            if h.degree() > d:
                raise RelaxError(f"degree {d} is below the degree {h.degree()} of a set in mode {m.id}")
        if _v_degree(model, m, d) < 1:
            raise RelaxError(f"degree {d} is too low for the dynamics of mode {m.id}")
    for k, e in enumerate(model.edges):
        for h in (*e.guard.ineqs, *e.guard.eqs):
            if h.degree() > d:
                raise RelaxError(f"degree {d} is below the degree {h.degree()} of the guard of edge {k}")


def _mode_box(mode: Mode) -> dict[str, tuple[float, float]]:
    box = {TIME: (0.0, 1.0)}
    for n in (*mode.states, *mode.theta_vars):
        box[n] = (-1.0, 1.0)
    return box


def _theta_mean(p: AffinePolyExpr, mode: Mode) -> AffinePolyExpr:
    dist = mode.theta_dist
    if dist is None:
        return p
    return p.map(lambda r: integrate_uniform(r, dist))


def _lie(v: AffinePolyExpr, mode: Mode) -> AffinePolyExpr:
    f = dict(zip(mode.states, mode.dynamics))
    return v.map(lambda r: lie_derivative(r, f, TIME))


def _reset_pullback(v: AffinePolyExpr, src: Mode, reset: Sequence[Polynomial], dest: Mode) -> AffinePolyExpr:
    """v_dest(t, R(x, theta)) as a polynomial on the source space."""
    subs = {TIME: Polynomial.var(src.space, TIME)}
    subs.update(zip(dest.states, reset))
    return v.map(lambda r: r.compose(subs, src.space))


def _complement_pieces(target: tuple[Polynomial, ...] | None) -> list[list[Polynomial]] | None:
    """Pieces {-g_i >= 0} whose union is the closed complement of the target in the box."""
    if target is None:
        return [[]]
    if not target:
        return []
    return [[_unit(-g)] for g in target]


def _facets(mode: Mode, model: HybridModel) -> list[tuple[str, float]]:
    """Box facets x_i = +-1 that do not carry a guard of an outgoing edge."""
    out = []
    for name in mode.states:
        for side in (-1.0, 1.0):
            guarded = False
            for e in model.edges:
                if e.source != mode.id or e.guard.ineqs:
                    continue
                if any(g.subs_value(name, side).is_zero() for g in e.guard.eqs):
                    guarded = True
            if not guarded:
                out.append((name, side))
    return out


# -- builders ----------------------------------------------------------------------

def build(model: HybridModel, opts: RelaxOptions) -> Relaxation:
    if opts.variant == Variant.ALPHA:
        return build_alpha(model, opts)
    if opts.variant == Variant.INNER:
        return build_inner(model, opts)
    return _build_outer_like(model, opts)


def build_outer(model: HybridModel, opts: RelaxOptions) -> Relaxation:
    if opts.variant != Variant.OUTER:
        raise RelaxError("build_outer expects the outer variant")
    return _build_outer_like(model, opts)


def build_free_time(model: HybridModel, opts: RelaxOptions) -> Relaxation:
    if opts.variant != Variant.FREE_TIME:
        raise RelaxError("build_free_time expects the free-time variant")
    return _build_outer_like(model, opts)


def _declare_common(prog: SosProgram, nm: HybridModel, d: int, theta_in_v: bool):
    w, v = {}, {}
    for m in nm.modes:
        w[m.id] = prog.declare(f"w_{m.id}", m.space, m.states, d)
        vvars = [TIME, *m.states, *(m.theta_vars if theta_in_v else ())]
        v[m.id] = prog.declare(f"v_{m.id}", m.space, vvars, _v_degree(nm, m, d))
    q = prog.declare("q", VarSpace([]), [], 0)
    return w, v, q


def _objective(nm: HybridModel, scaling: ScalingMap, w: dict[int, DecisionPolynomial], d: int) -> dict[int, float]:
    obj: dict[int, float] = {}
    for m in nm.modes:
        vol = float(np.prod([scaling[m.id].state[s][0] for s in m.states]))
        mom = lebesgue_moments(m.space, {s: (-1.0, 1.0) for s in m.states}, d)
        obj.update(linear_functional(w[m.id], vol * mom))
    return obj


def _build_outer_like(model: HybridModel, opts: RelaxOptions) -> Relaxation:
    d = opts.degree
    if not any(m.has_target for m in model.modes):
        raise RelaxError("empty target union: no mode has a target set")
    nm, scaling = normalize(model)
    _check_degrees(nm, d)
    free_time = opts.variant == Variant.FREE_TIME
    prog = SosProgram()
    w, v, q = _declare_common(prog, nm, d, theta_in_v=True)
    for m in nm.modes:
        S = m.space
        box = _mode_box(m)
        xv, thv = list(m.states), list(m.theta_vars)
        W, V, Q = w[m.id].expr(), v[m.id].expr(), q.expr(S)
        dom_x, dom_all = _domain(m, False), _domain(m, True)
        # w >= 0 on the state box
        prog.require_in_quadratic_module(W, xv, _box_ineqs(m, S, False, False), degree=d,
                                         name=f"mode{m.id}:w_nonneg", box=box)
        # terminal: v + q >= 0 where the target is reached
        if m.target is not None:
            tgt = [_unit(h) for h in m.target]
            if free_time:
                prog.require_in_quadratic_module(
                    V + Q, [TIME, *xv, *thv], _box_ineqs(m, S, True, True) + dom_all + tgt,
                    degree=d, name=f"mode{m.id}:terminal", box=box)
            else:
                VT = V.map(lambda r: r.subs_value(TIME, 1.0))
                prog.require_in_quadratic_module(
                    VT + Q, [*xv, *thv], _box_ineqs(m, S, True, False) + dom_all + tgt,
                    degree=d, name=f"mode{m.id}:terminal", box=box)
        # v nonincreasing along the flow
        prog.require_in_quadratic_module(
            -_lie(V, m), [TIME, *xv, *thv], _box_ineqs(m, S, True, True) + dom_all,
            degree=d, name=f"mode{m.id}:flow", box=box)
        # initial: w >= 1 + q + E_theta v(0, x, theta)
        V0 = _theta_mean(V.map(lambda r: r.subs_value(TIME, 0.0)), m)
        prog.require_in_quadratic_module(
            W - V0 - Q - 1.0, xv, _box_ineqs(m, S, False, False) + dom_x,
            degree=d, name=f"mode{m.id}:initial", box=box)
    for k, e in enumerate(nm.edges):
        src, dst = nm.mode(e.source), nm.mode(e.dest)
        S = src.space
        Vk = _theta_mean(v[dst.id].expr(), dst)
        expr = v[src.id].expr() - _reset_pullback(Vk, src, e.reset, dst)
        prog.require_in_quadratic_module(
            expr, [TIME, *src.states, *src.theta_vars],
            _box_ineqs(src, S, True, True) + _domain(src, True) + [_unit(h) for h in e.guard.ineqs],
            eqs=[_unit(g) for g in e.guard.eqs], degree=d, name=f"edge{k}:{e.source}->{e.dest}",
            box=_mode_box(src))
    problem = prog.assemble(_objective(nm, scaling, w, d), opts.gram_penalty)
    return Relaxation(opts, model, nm, scaling, problem, w, v, q)


def build_inner(model: HybridModel, opts: RelaxOptions) -> Relaxation:
    """Outer estimate of the failure set; its complement in the box is the inner estimate.

    Failure means ending outside the target at the horizon or touching the
    domain boundary away from a guard, for some parameter sequence; v is
    therefore independent of theta and the flow condition holds for all theta.
    """
    if opts.variant != Variant.INNER:
        raise RelaxError("build_inner expects the inner variant")
    d = opts.degree
    nm, scaling = normalize(model)
    _check_degrees(nm, d)
    prog = SosProgram()
    w, v, q = _declare_common(prog, nm, d, theta_in_v=False)
    for m in nm.modes:
        S = m.space
        box = _mode_box(m)
        xv, thv = list(m.states), list(m.theta_vars)
        W, V, Q = w[m.id].expr(), v[m.id].expr(), q.expr(S)
        prog.require_in_quadratic_module(W, xv, _box_ineqs(m, S, False, False), degree=d,
                                         name=f"mode{m.id}:w_nonneg", box=box)
        VT = V.map(lambda r: r.subs_value(TIME, 1.0))
        for i, piece in enumerate(_complement_pieces(m.target)):
            prog.require_in_quadratic_module(
                VT + Q, xv, _box_ineqs(m, S, False, False) + _domain(m, False) + piece,
                degree=d, name=f"mode{m.id}:miss{i}", box=box)
        prog.require_in_quadratic_module(
            -_lie(V, m), [TIME, *xv, *thv], _box_ineqs(m, S, True, True) + _domain(m, True),
            degree=d, name=f"mode{m.id}:flow", box=box)
        for name, side in _facets(m, nm):
            x = Polynomial.var(S, name)
            others = [1 - Polynomial.var(S, s) ** 2 for s in xv if s != name]
            prog.require_in_quadratic_module(
                V + Q, [TIME, *xv], [Polynomial.var(S, TIME) * (1 - Polynomial.var(S, TIME)), *others,
                                     *_domain(m, False)],
                eqs=[x - side], degree=d, name=f"mode{m.id}:exit[{name}={side:+g}]", box=box)
        for i, h in enumerate(m.domain_ineqs):
            hv = _unit(h)
            uses_theta = bool(set(h.used_vars()) & set(thv))
            vars_ = [TIME, *xv, *(thv if uses_theta else ())]
            prog.require_in_quadratic_module(
                V + Q, vars_, _box_ineqs(m, S, uses_theta, True), eqs=[hv], degree=d,
                name=f"mode{m.id}:exit[domain{i}]", box=box)
        V0 = V.map(lambda r: r.subs_value(TIME, 0.0))
        prog.require_in_quadratic_module(
            W - V0 - Q - 1.0, xv, _box_ineqs(m, S, False, False) + _domain(m, False),
            degree=d, name=f"mode{m.id}:initial", box=box)
    for k, e in enumerate(nm.edges):
        src, dst = nm.mode(e.source), nm.mode(e.dest)
        S = src.space
        expr = v[src.id].expr() - _reset_pullback(v[dst.id].expr(), src, e.reset, dst)
        prog.require_in_quadratic_module(
            expr, [TIME, *src.states, *src.theta_vars],
            _box_ineqs(src, S, True, True) + _domain(src, True) + [_unit(h) for h in e.guard.ineqs],
            eqs=[_unit(g) for g in e.guard.eqs], degree=d, name=f"edge{k}:{e.source}->{e.dest}",
            box=_mode_box(src))
    problem = prog.assemble(_objective(nm, scaling, w, d), opts.gram_penalty)
    return Relaxation(opts, model, nm, scaling, problem, w, v, q)


def build_alpha(model: HybridModel, opts: RelaxOptions) -> Relaxation:
    if opts.variant != Variant.ALPHA:
        raise RelaxError("build_alpha expects the alpha variant")
    if len(model.modes) != 1 or model.edges:
        raise RelaxError("alpha variant requires single mode")
    d = opts.degree
    alpha = float(opts.alpha)
    nm, scaling = normalize(model)
    _check_degrees(nm, d)
    m = nm.modes[0]
    if m.target is None:
        raise RelaxError("empty target union: no mode has a target set")
    prog = SosProgram()
    w, v, q = _declare_common(prog, nm, d, theta_in_v=True)
    S = m.space
    box = _mode_box(m)
    xv, thv = list(m.states), list(m.theta_vars)
    W, V, Q = w[m.id].expr(), v[m.id].expr(), q.expr(S)
    VT = V.map(lambda r: r.subs_value(TIME, 1.0))
    base = _box_ineqs(m, S, True, False) + _domain(m, True)
    prog.require_in_quadratic_module(W, xv, _box_ineqs(m, S, False, False), degree=d,
                                     name="mode%d:w_nonneg" % m.id, box=box)
    prog.require_in_quadratic_module(VT + Q * (alpha - 1.0), [*xv, *thv], base + [_unit(h) for h in m.target],
                                     degree=d, name=f"mode{m.id}:terminal_in", box=box)
    for i, piece in enumerate(_complement_pieces(m.target)):
        prog.require_in_quadratic_module(VT + Q * alpha, [*xv, *thv], base + piece, degree=d,
                                         name=f"mode{m.id}:terminal_out{i}", box=box)
    prog.require_in_quadratic_module(-_lie(V, m), [TIME, *xv, *thv], _box_ineqs(m, S, True, True) + _domain(m, True),
                                     degree=d, name=f"mode{m.id}:flow", box=box)
    V0 = _theta_mean(V.map(lambda r: r.subs_value(TIME, 0.0)), m)
    prog.require_in_quadratic_module(W - 1.0 - V0, xv, _box_ineqs(m, S, False, False) + _domain(m, False),
                                     degree=d, name=f"mode{m.id}:initial", box=box)
    prog.require_in_quadratic_module(q.expr(), [], degree=0, name="q_nonneg")
    problem = prog.assemble(_objective(nm, scaling, w, d), opts.gram_penalty)
    return Relaxation(opts, model, nm, scaling, problem, w, v, q)


# -- certificates --------------------------------------------------------------------

@dataclass
class ModeCertificate:
    w: Polynomial
    v: Polynomial


@dataclass
class Certificate:
    variant: Variant
    degree: int
    status: str
    objective: float
    q: float
    modes: dict[int, ModeCertificate]
    alpha: float | None = None
    tau1: float | None = None
    tau2: float | None = None
    model_name: str = ""
    scaling: dict[str, Any] = field(default_factory=dict)

    def thresholds(self) -> list[float]:
        if self.variant == Variant.ALPHA:
            return [self.tau1, self.tau2]
        return [1.0]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "model": self.model_name,
            "variant": self.variant.value,
            "degree": self.degree,
            "status": self.status,
            "objective": self.objective,
            "q": self.q,
        }
        if self.variant == Variant.ALPHA:
            out.update(alpha=self.alpha, tau1=self.tau1, tau2=self.tau2)
        out["modes"] = [
            {"id": k, "vars": list(c.w.space.names), "w": str(c.w), "v": str(c.v)}
            for k, c in sorted(self.modes.items())
        ]
        out["scaling"] = self.scaling
        return out

    def mode_box(self, mode_id: int) -> tuple[tuple[str, ...], np.ndarray]:
        """State names and physical box of a mode, read from the stored scaling."""
        try:
            st = self.scaling["modes"][str(mode_id)]["state"]
        except (KeyError, TypeError):
            raise RelaxError(f"certificate has no scaling for mode {mode_id}") from None
        box = np.array([[m - c, m + c] for c, m in st.values()], dtype=float)
        return tuple(st), box

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Certificate:
        try:
            modes = {}
            for mc in d["modes"]:
                space = VarSpace(mc["vars"])
                modes[int(mc["id"])] = ModeCertificate(parse_polynomial(space, mc["w"]),
                                                       parse_polynomial(space, mc["v"]))
            variant = Variant(d["variant"])
            return cls(variant, int(d["degree"]), str(d["status"]), float(d["objective"]), float(d["q"]),
                       modes, d.get("alpha"), d.get("tau1"), d.get("tau2"), d.get("model", ""),
                       d.get("scaling", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise RelaxError(f"malformed certificate: {exc}") from None

    @classmethod
    def loads(cls, text: str) -> Certificate:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise RelaxError(f"malformed certificate: {exc}") from None


@dataclass
class SolveResult:
    relaxation: Relaxation
    solution: SosSolution
    certificate: Certificate


def extract(relax: Relaxation, sol: SosSolution) -> Certificate:
    st = sol.status.value if isinstance(sol.status, Status) else str(sol.status)
    if st not in (Status.OPTIMAL.value, Status.SLOW_PROGRESS.value):
        raise RelaxError(f"solver status {st}: no certificate")
    if st == Status.SLOW_PROGRESS.value:
        logger.warning("certificate extracted from a SlowProgress solve")
    modes = {}
    for m in relax.normalized.modes:
        sc = relax.scaling[m.id]
        w = sc.to_physical(relax.w[m.id].evaluate(sol.free))
        v = sc.to_physical(relax.v[m.id].evaluate(sol.free))
        modes[m.id] = ModeCertificate(w, v)
    q = float(relax.q.evaluate(sol.free).coefficient(()))
    cert = Certificate(relax.options.variant, relax.options.degree, st, float(sol.objective), q, modes,
                       model_name=relax.model.name, scaling=relax.scaling.to_dict())
    if relax.options.variant == Variant.ALPHA:
        a = float(relax.options.alpha)
        cert.alpha = a
        cert.tau1 = 1.0 + q * (1.0 - a)
        cert.tau2 = 1.0 - q * a
    return cert


def solve_relaxation(model: HybridModel, opts: RelaxOptions,
                     solver_opts: SolverOptions | None = None) -> SolveResult:
    relax = build(model, opts)
    sf = to_standard_form(relax.problem)
    logger.info("%s d=%d: %d rows, %d blocks (max %d), %d free", opts.variant.value, opts.degree,
                sf.m, len(relax.problem.block_sizes), max(relax.problem.block_sizes, default=0),
                relax.problem.n_free)
    raw = solve(sf, solver_opts)
    sol = sos_solution(sf, raw, relax.problem.c)
    if raw.status not in (Status.OPTIMAL, Status.SLOW_PROGRESS):
        return SolveResult(relax, sol, Certificate(opts.variant, opts.degree, raw.status.value, float("nan"),
                                                   float("nan"), {}, model_name=model.name))
    return SolveResult(relax, sol, extract(relax, sol))


# -- level sets ----------------------------------------------------------------------

@dataclass
class LevelSetGrid:
    mode: int
    names: tuple[str, ...]
    axes: list[np.ndarray]
    points: np.ndarray
    values: np.ndarray
    thresholds: list[float]
    labels: list[str]
    classes: np.ndarray  # bool, one column per label

    def column(self, label: str) -> np.ndarray:
        return self.classes[:, self.labels.index(label)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow([*self.names, "w", *self.labels])
        for p, val, cls in zip(self.points, self.values, self.classes):
            wr.writerow([*(f"{x:.9g}" for x in p), f"{val:.9g}", *(str(int(c)) for c in cls)])
        return buf.getvalue()


def grid_points(box: Sequence[Sequence[float]], n: int | Sequence[int]) -> tuple[list[np.ndarray], np.ndarray]:
    ns = [n] * len(box) if isinstance(n, (int, np.integer)) else list(n)
    axes = [np.linspace(lo, hi, k) if k > 1 else np.array([(lo + hi) / 2.0]) for (lo, hi), k in zip(box, ns)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    return axes, pts


def sample_levelset(cert: Certificate, model: HybridModel | None, mode_id: int, n: int | Sequence[int] = 51,
                    axes: Sequence[np.ndarray] | None = None) -> LevelSetGrid:
    """Evaluate w on a grid and classify points; without a model the box comes from the certificate."""
    if model is not None:
        mode = model.mode(mode_id)
        states, box = tuple(mode.states), mode.box_array()
    else:
        states, box = cert.mode_box(mode_id)
    if axes is None:
        axes, pts = grid_points(box, n)
    else:
        axes = [np.asarray(a, dtype=float) for a in axes]
        for a, (lo, hi) in zip(axes, box):
            if a.min() < lo - 1e-12 or a.max() > hi + 1e-12:
                raise RelaxError(f"grid outside the box of mode {mode_id}")
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
    if mode_id not in cert.modes:
        raise RelaxError(f"certificate has no mode {mode_id}")
    w = cert.modes[mode_id].w
    vals = {s: pts[:, i] for i, s in enumerate(states)}
    vals["__n__"] = np.zeros(len(pts))
    wv = w.to_space(VarSpace([*states])).eval_many(vals) if set(w.used_vars()) <= set(states) \
        else w.eval_many(vals)
    if cert.variant == Variant.ALPHA:
        labels = ["in_S1", "in_S2"]
        classes = np.stack([wv >= cert.tau1, wv >= cert.tau2], axis=1)
        thresholds = [cert.tau1, cert.tau2]
    elif cert.variant == Variant.INNER:
        labels = ["inside"]
        classes = (wv < 1.0)[:, None]
        thresholds = [1.0]
    else:
        labels = ["inside"]
        classes = (wv >= 1.0)[:, None]
        thresholds = [1.0]
    return LevelSetGrid(mode_id, states, list(axes), pts, wv, thresholds, labels, classes)
