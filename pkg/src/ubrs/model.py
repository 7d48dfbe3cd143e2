"""Quasi-uncertain hybrid system models: data types, JSON codec, scaling, checks."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import jsonschema
import numpy as np

from .poly import (
    Polynomial,
    PolynomialSyntaxError,
    UniformBoxDistribution,
    VarSpace,
    affine_rescale,
    inverse_maps,
    parse_polynomial,
)

logger = logging.getLogger(__name__)

TIME = "t"


class ModelError(ValueError):
    """Raised for any schema, parse, or structural problem in a model."""


@dataclass(frozen=True)
class SemialgebraicSet:
    """{h_i >= 0 for all i} intersected with {g_k = 0 for all k}."""

    ineqs: tuple[Polynomial, ...] = ()
    eqs: tuple[Polynomial, ...] = ()

    def is_unconstrained(self) -> bool:
        return not self.ineqs and not self.eqs

    def contains(self, values: Mapping[str, np.ndarray], tol: float = 0.0, eq_tol: float = 1e-9) -> np.ndarray:
        shape = np.shape(next(iter(values.values())))
        ok = np.ones(shape, dtype=bool)
        for h in self.ineqs:
            ok &= h.eval_many(values) >= -tol
        for g in self.eqs:
            ok &= np.abs(g.eval_many(values)) <= eq_tol
        return ok


@dataclass(frozen=True)
class Mode:
    id: int
    states: tuple[str, ...]
    box: tuple[tuple[float, float], ...]
    dynamics: tuple[Polynomial, ...]
    theta_vars: tuple[str, ...] = ()
    theta_box: tuple[tuple[float, float], ...] = ()
    domain_ineqs: tuple[Polynomial, ...] = ()
    # None: no target in this mode.  Empty tuple: the whole box is the target.
    target: tuple[Polynomial, ...] | None = None

    @property
    def space(self) -> VarSpace:
        return self.dynamics[0].space if self.dynamics else mode_space(self.states, self.theta_vars)

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def has_target(self) -> bool:
        return self.target is not None

    @property
    def theta_dist(self) -> UniformBoxDistribution | None:
        if not self.theta_vars:
            return None
        return UniformBoxDistribution.from_box(self.theta_vars, self.theta_box)

    @property
    def domain(self) -> SemialgebraicSet:
        return SemialgebraicSet(self.domain_ineqs)

    @property
    def target_set(self) -> SemialgebraicSet | None:
        return None if self.target is None else SemialgebraicSet(self.target)

    def box_array(self) -> np.ndarray:
        return np.array(self.box, dtype=float).reshape(-1, 2)

    def theta_box_array(self) -> np.ndarray:
        return np.array(self.theta_box, dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class Edge:
    source: int
    dest: int
    guard: SemialgebraicSet
    reset: tuple[Polynomial, ...]


@dataclass(frozen=True)
class HybridModel:
    name: str
    horizon: float
    modes: tuple[Mode, ...]
    edges: tuple[Edge, ...] = ()
    description: str = ""

    def mode(self, mode_id: int) -> Mode:
        for m in self.modes:
            if m.id == mode_id:
                return m
        raise KeyError(f"no mode with id {mode_id}")

    def mode_index(self, mode_id: int) -> int:
        for i, m in enumerate(self.modes):
            if m.id == mode_id:
                return i
        raise KeyError(f"no mode with id {mode_id}")

    def edges_from(self, mode_id: int) -> list[tuple[int, Edge]]:
        return [(k, e) for k, e in enumerate(self.edges) if e.source == mode_id]


def mode_space(states: Sequence[str], theta_vars: Sequence[str]) -> VarSpace:
    return VarSpace([TIME, *states, *theta_vars])


# -- JSON codec ----------------------------------------------------------------

_POLY_LIST = {"type": "array", "items": {"type": "string"}}
_BOX = {
    "type": "array",
    "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
}

MODEL_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["name", "horizon", "modes"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "modes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "states", "box", "dynamics"],
                "properties": {
                    "id": {"type": "integer"},
                    "states": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    "box": _BOX,
                    "dynamics": _POLY_LIST,
                    "theta": {
                        "type": "object",
                        "required": ["vars", "box"],
                        "properties": {
                            "vars": {"type": "array", "items": {"type": "string"}},
                            "box": _BOX,
                            "dist": {"enum": ["uniform"]},
                        },
                        "additionalProperties": False,
                    },
                    "domain_ineqs": _POLY_LIST,
                    "target_ineqs": _POLY_LIST,
                },
                "additionalProperties": False,
            },
        },
        "edges": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["from", "to", "reset"],
                "properties": {
                    "from": {"type": "integer"},
                    "to": {"type": "integer"},
                    "guard_ineqs": _POLY_LIST,
                    "guard_eqs": _POLY_LIST,
                    "reset": _POLY_LIST,
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


def _parse_all(space: VarSpace, texts: Sequence[str], where: str) -> tuple[Polynomial, ...]:
    out = []
    for i, s in enumerate(texts):
        try:
            out.append(parse_polynomial(space, s))
        except PolynomialSyntaxError as exc:
            raise ModelError(f"{where}[{i}]: {exc}") from None
    return tuple(out)


def _box(raw, where: str) -> tuple[tuple[float, float], ...]:
    out = []
    for i, (lo, hi) in enumerate(raw):
        if not float(lo) < float(hi):
            raise ModelError(f"{where}[{i}]: degenerate interval [{lo}, {hi}]")
        out.append((float(lo), float(hi)))
    return tuple(out)


def model_from_dict(doc: Mapping[str, Any]) -> HybridModel:
    validator = jsonschema.Draft202012Validator(MODEL_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ModelError(f"schema violation at {path}: {err.message}")

    modes = []
    for mi, raw in enumerate(doc["modes"]):
        where = f"modes/{mi}"
        states = tuple(raw["states"])
        theta = raw.get("theta") or {"vars": [], "box": []}
        theta_vars = tuple(theta["vars"])
        if TIME in states or TIME in theta_vars:
            raise ModelError(f"{where}: variable name {TIME!r} is reserved for time")
        try:
            space = mode_space(states, theta_vars)
        except ValueError as exc:
            raise ModelError(f"{where}: {exc}") from None
        box = _box(raw["box"], f"{where}/box")
        if len(box) != len(states):
            raise ModelError(f"{where}: box has {len(box)} intervals for {len(states)} states")
        theta_box = _box(theta["box"], f"{where}/theta/box")
        if len(theta_box) != len(theta_vars):
            raise ModelError(f"{where}: theta box has {len(theta_box)} intervals for {len(theta_vars)} vars")
        dynamics = _parse_all(space, raw["dynamics"], f"{where}/dynamics")
        if len(dynamics) != len(states):
            raise ModelError(f"{where}: {len(dynamics)} dynamics entries for {len(states)} states")
        for i, f in enumerate(dynamics):
            if TIME in f.used_vars():
                raise ModelError(f"{where}/dynamics[{i}]: time-varying dynamics are not supported")
        domain = _parse_all(space, raw.get("domain_ineqs", []), f"{where}/domain_ineqs")
        target = raw.get("target_ineqs")
        target = None if target is None else _parse_all(space, target, f"{where}/target_ineqs")
        for i, h in enumerate((*domain, *(target or ()))):
            if TIME in h.used_vars():
                raise ModelError(f"{where}: set descriptions may not reference time")
        modes.append(Mode(int(raw["id"]), states, box, dynamics, theta_vars, theta_box, domain, target))

    ids = [m.id for m in modes]
    if len(set(ids)) != len(ids):
        raise ModelError(f"duplicate mode ids {ids}")
    by_id = {m.id: m for m in modes}

    edges = []
    for ei, raw in enumerate(doc.get("edges", [])):
        where = f"edges/{ei}"
        src, dst = raw["from"], raw["to"]
        if src not in by_id or dst not in by_id:
            raise ModelError(f"{where}: edge ({src}->{dst}) references an unknown mode")
        space = by_id[src].space
        ineqs = _parse_all(space, raw.get("guard_ineqs", []), f"{where}/guard_ineqs")
        eqs = _parse_all(space, raw.get("guard_eqs", []), f"{where}/guard_eqs")
        if not ineqs and not eqs:
            raise ModelError(f"{where}: edge ({src}->{dst}) has an empty guard description")
        reset = _parse_all(space, raw["reset"], f"{where}/reset")
        if len(reset) != by_id[dst].n:
            raise ModelError(
                f"{where}: reset of edge ({src}->{dst}) has dimension {len(reset)}, "
                f"destination mode {dst} has {by_id[dst].n} states")
        for p in (*ineqs, *eqs, *reset):
            if TIME in p.used_vars():
                raise ModelError(f"{where}: guards and resets may not reference time")
        edges.append(Edge(int(src), int(dst), SemialgebraicSet(ineqs, eqs), reset))

    return HybridModel(str(doc["name"]), float(doc["horizon"]), tuple(modes), tuple(edges),
                       str(doc.get("description", "")))


def load_model(source) -> HybridModel:
    """Load from a path, a JSON string, or an already-parsed mapping."""
    if isinstance(source, Mapping):
        return model_from_dict(source)
    text = str(source)
    if not text.lstrip().startswith("{"):
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON: {exc}") from None
    return model_from_dict(doc)


def model_to_dict(model: HybridModel) -> dict[str, Any]:
    modes = []
    for m in model.modes:
        d: dict[str, Any] = {
            "id": m.id,
            "states": list(m.states),
            "box": [list(b) for b in m.box],
            "dynamics": [str(f) for f in m.dynamics],
        }
        if m.theta_vars:
            d["theta"] = {"vars": list(m.theta_vars), "box": [list(b) for b in m.theta_box], "dist": "uniform"}
        if m.domain_ineqs:
            d["domain_ineqs"] = [str(h) for h in m.domain_ineqs]
        if m.target is not None:
            d["target_ineqs"] = [str(h) for h in m.target]
        modes.append(d)
    edges = []
    for e in model.edges:
        d = {"from": e.source, "to": e.dest}
        if e.guard.ineqs:
            d["guard_ineqs"] = [str(h) for h in e.guard.ineqs]
        if e.guard.eqs:
            d["guard_eqs"] = [str(g) for g in e.guard.eqs]
        d["reset"] = [str(r) for r in e.reset]
        edges.append(d)
    doc: dict[str, Any] = {"name": model.name}
    if model.description:
        doc["description"] = model.description
    doc["horizon"] = model.horizon
    doc["modes"] = modes
    if edges:
        doc["edges"] = edges
    return doc


def dump_model(model: HybridModel) -> str:
    return json.dumps(model_to_dict(model), indent=2) + "\n"


def models_close(a: HybridModel, b: HybridModel, atol: float = 1e-12) -> bool:
    """Field-level equality with a coefficient tolerance."""

    def polys_close(p: Sequence[Polynomial] | None, q: Sequence[Polynomial] | None) -> bool:
        if p is None or q is None:
            return p is None and q is None
        return len(p) == len(q) and all(x.space == y.space and x.allclose(y, atol) for x, y in zip(p, q))

    if a.name != b.name or abs(a.horizon - b.horizon) > atol or len(a.modes) != len(b.modes) \
            or len(a.edges) != len(b.edges):
        return False
    for m, n in zip(a.modes, b.modes):
        if (m.id, m.states, m.theta_vars) != (n.id, n.states, n.theta_vars):
            return False
        if not np.allclose(m.box_array(), n.box_array(), rtol=0, atol=atol):
            return False
        if not np.allclose(m.theta_box_array(), n.theta_box_array(), rtol=0, atol=atol):
            return False
        if not (polys_close(m.dynamics, n.dynamics) and polys_close(m.domain_ineqs, n.domain_ineqs)
                and polys_close(m.target, n.target)):
            return False
    for e, f in zip(a.edges, b.edges):
        if (e.source, e.dest) != (f.source, f.dest):
            return False
        if not (polys_close(e.guard.ineqs, f.guard.ineqs) and polys_close(e.guard.eqs, f.guard.eqs)
                and polys_close(e.reset, f.reset)):
            return False
    return True


# -- scaling -------------------------------------------------------------------

@dataclass(frozen=True)
class ModeScaling:
    """Physical = c * normalized + m for each state and parameter."""

    state: dict[str, tuple[float, float]]
    theta: dict[str, tuple[float, float]]
    horizon: float

    def forward_maps(self) -> dict[str, tuple[float, float]]:
        return {TIME: (self.horizon, 0.0), **self.state, **self.theta}

    def to_normalized(self, p: Polynomial) -> Polynomial:
        """Re-express a physical-coordinate polynomial in normalized coordinates."""
        return affine_rescale(p, self.forward_maps())

    def to_physical(self, p: Polynomial) -> Polynomial:
        return affine_rescale(p, inverse_maps(self.forward_maps()))

    def state_to_normalized(self, x: np.ndarray, states: Sequence[str]) -> np.ndarray:
        c = np.array([self.state[s][0] for s in states])
        m = np.array([self.state[s][1] for s in states])
        return (np.asarray(x, dtype=float) - m) / c

    def state_to_physical(self, xh: np.ndarray, states: Sequence[str]) -> np.ndarray:
        c = np.array([self.state[s][0] for s in states])
        m = np.array([self.state[s][1] for s in states])
        return np.asarray(xh, dtype=float) * c + m


@dataclass(frozen=True)
class ScalingMap:
    modes: dict[int, ModeScaling] = field(default_factory=dict)
    horizon: float = 1.0

    def __getitem__(self, mode_id: int) -> ModeScaling:
        return self.modes[mode_id]

    def to_dict(self) -> dict[str, Any]:
        return {
            "horizon": self.horizon,
            "modes": {str(k): {"state": {n: list(v) for n, v in s.state.items()},
                               "theta": {n: list(v) for n, v in s.theta.items()}}
                      for k, s in self.modes.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ScalingMap:
        T = float(d["horizon"])
        modes = {int(k): ModeScaling({n: tuple(v) for n, v in s["state"].items()},
                                     {n: tuple(v) for n, v in s["theta"].items()}, T)
                 for k, s in d["modes"].items()}
        return cls(modes, T)


def _interval_map(lo: float, hi: float) -> tuple[float, float]:
    if not hi > lo:
        raise ModelError(f"degenerate box [{lo}, {hi}]")
    return ((hi - lo) / 2.0, (hi + lo) / 2.0)


def scaling_for(model: HybridModel) -> ScalingMap:
    T = model.horizon
    out = {}
    for m in model.modes:
        out[m.id] = ModeScaling(
            {s: _interval_map(lo, hi) for s, (lo, hi) in zip(m.states, m.box)},
            {s: _interval_map(lo, hi) for s, (lo, hi) in zip(m.theta_vars, m.theta_box)},
            T,
        )
    return ScalingMap(out, T)


def _apply_scaling(model: HybridModel, scaling: ScalingMap, inverse: bool) -> HybridModel:
    new_T = 1.0 if not inverse else scaling.horizon
    modes = []
    for m in model.modes:
        s = scaling[m.id]
        conv = s.to_physical if inverse else s.to_normalized
        dyn = []
        for name, f in zip(m.states, m.dynamics):
            c = s.state[name][0]
            # d xh / d th = (T / c) f(c xh + m)
            factor = (c / s.horizon) if inverse else (s.horizon / c)
            dyn.append(conv(f).scale(factor))
        if inverse:
            box = tuple((c * -1.0 + mm, c * 1.0 + mm) for c, mm in (s.state[n] for n in m.states))
            tbox = tuple((c * -1.0 + mm, c * 1.0 + mm) for c, mm in (s.theta[n] for n in m.theta_vars))
        else:
            box = tuple((-1.0, 1.0) for _ in m.states)
            tbox = tuple((-1.0, 1.0) for _ in m.theta_vars)
        modes.append(Mode(
            m.id, m.states, box, tuple(dyn), m.theta_vars, tbox,
            tuple(conv(h) for h in m.domain_ineqs),
            None if m.target is None else tuple(conv(h) for h in m.target),
        ))
    edges = []
    for e in model.edges:
        src, dst = scaling[e.source], scaling[e.dest]
        conv = src.to_physical if inverse else src.to_normalized
        dest_states = model.mode(e.dest).states
        reset = []
        for name, r in zip(dest_states, e.reset):
            c, mm = dst.state[name]
            if inverse:
                # r is normalized: r_hat(xh) = (R(x) - m_k) / c_k
                reset.append(conv(r).scale(c) + mm)
            else:
                reset.append((conv(r) - mm).scale(1.0 / c))
        guard = SemialgebraicSet(tuple(conv(h) for h in e.guard.ineqs), tuple(conv(g) for g in e.guard.eqs))
        edges.append(Edge(e.source, e.dest, guard, tuple(reset)))
    return HybridModel(model.name, new_T, tuple(modes), tuple(edges), model.description)


def normalize(model: HybridModel) -> tuple[HybridModel, ScalingMap]:
    """Map every box to [-1, 1] and the horizon to 1; variable names are kept."""
    scaling = scaling_for(model)
    return _apply_scaling(model, scaling, inverse=False), scaling


def denormalize(model: HybridModel, scaling: ScalingMap) -> HybridModel:
    return _apply_scaling(model, scaling, inverse=True)


# -- assumption checks ------------------------------------------------------------

@dataclass
class AssumptionReport:
    samples: int
    guard_points: dict[int, int] = field(default_factory=dict)
    guard_overlaps: int = 0
    guard_target_overlaps: int = 0
    interior_guard_points: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return self.guard_overlaps == 0 and self.guard_target_overlaps == 0 and self.interior_guard_points == 0


def _project_onto(eqs: Sequence[Polynomial], names: Sequence[str], pts: np.ndarray, iters: int = 30) -> np.ndarray:
    """Gauss-Newton (minimum-norm steps) onto {g = 0} for a batch of points."""
    if not eqs:
        return pts
    grads = [[g.diff(n) for n in names] for g in eqs]
    x = pts.copy()
    for _ in range(iters):
        vals = {n: x[:, i] for i, n in enumerate(names)}
        r = np.stack([g.eval_many(vals) for g in eqs], axis=1)
        if np.max(np.abs(r)) < 1e-13:
            break
        J = np.stack([np.stack([dg.eval_many(vals) for dg in row], axis=1) for row in grads], axis=1)
        for k in range(len(x)):
            step, *_ = np.linalg.lstsq(J[k], r[k], rcond=None)
            x[k] -= step
    return x


def check_assumptions(model: HybridModel, samples: int = 1000, seed: int = 0) -> AssumptionReport:
    """Sampling-based search for violations; a clean report is not a proof."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    report = AssumptionReport(samples)
    rng = np.random.default_rng(seed)
    norm, _ = normalize(model)
    for m in norm.modes:
        out_edges = norm.edges_from(m.id)
        if not out_edges:
            continue
        names = [*m.states, *m.theta_vars]
        dim = len(names)
        for k, e in out_edges:
            pts = rng.uniform(-1.0, 1.0, size=(samples, dim))
            pts = _project_onto(e.guard.eqs, names, pts)
            vals = {n: pts[:, i] for i, n in enumerate(names)}
            vals[TIME] = np.zeros(len(pts))
            keep = np.all(np.abs(pts) <= 1.0 + 1e-12, axis=1)
            keep &= e.guard.contains(vals, tol=0.0, eq_tol=1e-8)
            pts = pts[keep]
            report.guard_points[k] = len(pts)
            if not len(pts):
                report.warnings.append(f"edge {k} ({e.source}->{e.dest}): no guard points found by sampling")
                continue
            vals = {n: pts[:, i] for i, n in enumerate(names)}
            vals[TIME] = np.zeros(len(pts))
            for k2, e2 in out_edges:
                if k2 != k:
                    report.guard_overlaps += int(np.sum(e2.guard.contains(vals, tol=0.0, eq_tol=1e-8)))
            if m.target is not None:
                report.guard_target_overlaps += int(np.sum(m.target_set.contains(vals, tol=0.0)))
            interior = np.all(np.abs(pts[:, :m.n]) < 1.0 - 1e-6, axis=1)
            for h in m.domain_ineqs:
                interior &= h.eval_many(vals) > 1e-6
            n_int = int(np.sum(interior))
            report.interior_guard_points += n_int
            if n_int:
                report.warnings.append(
                    f"edge {k} ({e.source}->{e.dest}): {n_int} guard points lie inside the domain")
    for w in report.warnings:
        logger.warning(w)
    return report
