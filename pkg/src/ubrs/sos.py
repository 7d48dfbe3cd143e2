"""Compile quadratic-module membership constraints into block SDP data.

A constraint ``expr in Q_d({h_k >= 0, g_l = 0})`` becomes

    expr = z0' G0 z0 + sum_k h_k * (zk' Gk zk) + sum_l g_l * p_l,

with Gk PSD, p_l free polynomials, matched coefficient by coefficient in the
graded-lex monomial basis.  Every equality row reads

    sum <A, G> + sum a_f * y_f = b,

where off-diagonal Gram entries are stored once (upper triangle) and count
twice, the SDPA convention for symmetric data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .model import _project_onto
from .poly import Exponents, Polynomial, VarSpace, monomial_basis

logger = logging.getLogger(__name__)


class SosError(ValueError):
    pass


@dataclass(frozen=True)
class DecisionPolynomial:
    """Polynomial with unknown coefficients occupying consecutive free slots."""

    name: str
    space: VarSpace
    variables: tuple[str, ...]
    degree: int
    basis: tuple[Exponents, ...]
    offset: int

    @property
    def size(self) -> int:
        return len(self.basis)

    @property
    def slots(self) -> range:
        return range(self.offset, self.offset + len(self.basis))

    def expr(self, space: VarSpace | None = None) -> AffinePolyExpr:
        """Affine expression of this unknown, optionally re-expressed on another space by name."""
        lin = {self.offset + k: Polynomial(self.space, {e: 1.0}) for k, e in enumerate(self.basis)}
        if space is not None and space != self.space:
            lin = {s: p.to_space(space) for s, p in lin.items()}
            return AffinePolyExpr(Polynomial.zero(space), lin)
        return AffinePolyExpr(Polynomial.zero(self.space), lin)

    def evaluate(self, values: np.ndarray) -> Polynomial:
        coeffs = np.asarray(values, dtype=float)[self.offset:self.offset + self.size]
        return Polynomial(self.space, dict(zip(self.basis, coeffs.tolist())))


class AffinePolyExpr:
    """const + sum_s y_s * lin[s], with y the free decision slots."""

    __slots__ = ("const", "lin")

    def __init__(self, const: Polynomial, lin: Mapping[int, Polynomial] | None = None):
        self.const = const
        self.lin = {s: p for s, p in (lin or {}).items() if not p.is_zero()}
        for p in self.lin.values():
            if p.space != const.space:
                raise SosError("slot polynomial on a different variable space")

    @property
    def space(self) -> VarSpace:
        return self.const.space

    @classmethod
    def constant(cls, p: Polynomial) -> AffinePolyExpr:
        return cls(p)

    def _lift(self, other) -> AffinePolyExpr:
        if isinstance(other, AffinePolyExpr):
            return other
        if isinstance(other, Polynomial):
            return AffinePolyExpr(other)
        if isinstance(other, (int, float)):
            return AffinePolyExpr(Polynomial.constant(self.space, float(other)))
        raise TypeError(f"cannot combine AffinePolyExpr with {type(other).__name__}")

    def __add__(self, other) -> AffinePolyExpr:
        other = self._lift(other)
        lin = dict(self.lin)
        for s, p in other.lin.items():
            lin[s] = lin[s] + p if s in lin else p
        return AffinePolyExpr(self.const + other.const, lin)

    __radd__ = __add__

    def __neg__(self) -> AffinePolyExpr:
        return self.map(lambda p: -p)

    def __sub__(self, other) -> AffinePolyExpr:
        return self + (-self._lift(other))

    def __rsub__(self, other) -> AffinePolyExpr:
        return self._lift(other) - self

    def __mul__(self, other) -> AffinePolyExpr:
        if isinstance(other, (int, float, Polynomial)):
            return self.map(lambda p: p * other)
        raise TypeError("AffinePolyExpr can only be multiplied by fixed data")

    __rmul__ = __mul__

    def map(self, fn: Callable[[Polynomial], Polynomial]) -> AffinePolyExpr:
        """Apply a linear map of polynomials to every component."""
        return AffinePolyExpr(fn(self.const), {s: fn(p) for s, p in self.lin.items()})

    def degree(self) -> int:
        return max([self.const.degree(), *(p.degree() for p in self.lin.values())])

    def used_vars(self) -> set[str]:
        out = set(self.const.used_vars())
        for p in self.lin.values():
            out.update(p.used_vars())
        return out

    def evaluate(self, values: np.ndarray) -> Polynomial:
        out = self.const
        for s, p in self.lin.items():
            out = out + p.scale(values[s])
        return out

    def coefficient_table(self) -> dict[Exponents, tuple[float, dict[int, float]]]:
        table: dict[Exponents, tuple[float, dict[int, float]]] = {}
        for e, c in self.const.terms.items():
            table[e] = (c, {})
        for s in sorted(self.lin):
            for e, c in self.lin[s].terms.items():
                const, row = table.get(e, (0.0, {}))
                row[s] = row.get(s, 0.0) + c
                table[e] = (const, row)
        return table


@dataclass
class GramTerm:
    block: int
    basis: tuple[Exponents, ...]
    multiplier: Polynomial  # 1 for s0, h_k otherwise


@dataclass
class FreeTerm:
    multiplier: DecisionPolynomial
    factor: Polynomial  # equality polynomial g_l


@dataclass
class SosConstraintBlock:
    name: str
    expr: AffinePolyExpr
    variables: tuple[str, ...]
    ineqs: tuple[Polynomial, ...]
    eqs: tuple[Polynomial, ...]
    degree: int
    grams: list[GramTerm]
    free_terms: list[FreeTerm]
    rows: range
    box: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def gram_sizes(self) -> list[int]:
        return [len(g.basis) for g in self.grams]


@dataclass
class SdpProblem:
    """minimize c'y over free y and PSD blocks G subject to the equality rows."""

    n_free: int
    c: np.ndarray
    free_labels: list[str]
    block_sizes: list[int]
    block_labels: list[str]
    b: np.ndarray
    gram_rows: np.ndarray
    gram_blocks: np.ndarray
    gram_i: np.ndarray
    gram_j: np.ndarray
    gram_vals: np.ndarray
    free_rows: np.ndarray
    free_cols: np.ndarray
    free_vals: np.ndarray
    decisions: dict[str, DecisionPolynomial]
    constraints: list[SosConstraintBlock]
    # weight of sum(trace(G)) added to the objective; keeps the optimal face bounded
    gram_penalty: float = 0.0

    @property
    def m(self) -> int:
        return len(self.b)


class SosProgram:
    """Accumulates decision polynomials and quadratic-module constraints."""

    def __init__(self):
        self.decisions: dict[str, DecisionPolynomial] = {}
        self._n_free = 0
        self._free_labels: list[str] = []
        self._block_sizes: list[int] = []
        self._block_labels: list[str] = []
        self._b: list[float] = []
        self._g: list[tuple[int, int, int, int, float]] = []
        self._f: list[tuple[int, int, float]] = []
        self.constraints: list[SosConstraintBlock] = []
        self._internal = 0

    @property
    def n_rows(self) -> int:
        return len(self._b)

    def declare(self, name: str, space: VarSpace, variables: Sequence[str], degree: int) -> DecisionPolynomial:
        if name in self.decisions:
            raise SosError(f"duplicate decision symbol {name!r}")
        if degree < 0:
            raise SosError("degree must be nonnegative")
        basis = tuple(monomial_basis(space, variables, degree))
        dp = DecisionPolynomial(name, space, tuple(variables), degree, basis, self._n_free)
        self._n_free += len(basis)
        self._free_labels.extend(f"{name}[{k}]" for k in range(len(basis)))
        self.decisions[name] = dp
        return dp

    def require_in_quadratic_module(
        self,
        expr: AffinePolyExpr | Polynomial,
        variables: Sequence[str],
        ineqs: Iterable[Polynomial] = (),
        eqs: Iterable[Polynomial] = (),
        degree: int | None = None,
        name: str = "",
        box: Mapping[str, tuple[float, float]] | None = None,
    ) -> SosConstraintBlock:
        """Emit Gram blocks and coefficient-matching rows for expr in Q_d.

        ``variables`` spans the monomial bases; every variable of ``expr`` and
        of the set description must be among them.
        """
        if isinstance(expr, Polynomial):
            expr = AffinePolyExpr(expr)
        space = expr.space
        ineqs = tuple(ineqs)
        eqs = tuple(eqs)
        variables = tuple(variables)
        d = expr.degree() if degree is None else degree
        if d < 0:
            d = 0
        if expr.degree() > d:
            raise SosError(f"{name}: expression degree {expr.degree()} exceeds relaxation degree {d}")
        allowed = set(variables)
        stray = expr.used_vars() - allowed
        for h in (*ineqs, *eqs):
            if h.space != space:
                raise SosError(f"{name}: set polynomial on a different variable space")
            stray |= set(h.used_vars()) - allowed
        if stray:
            raise SosError(f"{name}: variables {sorted(stray)} outside the constraint's variable list")

        row_basis = monomial_basis(space, variables, d)
        row0 = len(self._b)
        row_of = {e: row0 + k for k, e in enumerate(row_basis)}
        table = expr.coefficient_table()
        for e in row_basis:
            const, lin = table.get(e, (0.0, {}))
            self._b.append(const)
            r = row_of[e]
            for s, c in lin.items():
                self._f.append((r, s, -c))

        grams: list[GramTerm] = []
        one = Polynomial.constant(space, 1.0)
        for h in (one, *ineqs):
            dh = h.degree()
            if dh > d:
                raise SosError(f"{name}: set polynomial degree {dh} exceeds relaxation degree {d}")
            half = (d - dh) // 2
            basis = tuple(monomial_basis(space, variables, half))
            blk = len(self._block_sizes)
            self._block_sizes.append(len(basis))
            self._block_labels.append(f"{name}:s{len(grams)}")
            h_terms = h.sorted_terms()
            nb = len(basis)
            for a in range(nb):
                ea = basis[a]
                for bb in range(a, nb):
                    eab = tuple(x + y for x, y in zip(ea, basis[bb]))
                    for eh, ch in h_terms:
                        e = tuple(x + y for x, y in zip(eab, eh))
                        self._g.append((row_of[e], blk, a, bb, ch))
            grams.append(GramTerm(blk, basis, h))

        free_terms: list[FreeTerm] = []
        for g in eqs:
            dg = g.degree()
            if dg > d:
                raise SosError(f"{name}: equality degree {dg} exceeds relaxation degree {d}")
            self._internal += 1
            mult = self.declare(f"_{name}:p{len(free_terms)}#{self._internal}", space, variables, d - dg)
            for k, em in enumerate(mult.basis):
                for eg, cg in g.sorted_terms():
                    e = tuple(x + y for x, y in zip(em, eg))
                    self._f.append((row_of[e], mult.offset + k, cg))
            free_terms.append(FreeTerm(mult, g))

        block = SosConstraintBlock(name, expr, variables, ineqs, eqs, d, grams, free_terms,
                                   range(row0, len(self._b)), dict(box or {}))
        self.constraints.append(block)
        return block

    def assemble(self, objective: AffinePolyExpr | Mapping[int, float] | None = None,
                 gram_penalty: float = 0.0) -> SdpProblem:
        """Freeze into an :class:`SdpProblem`; ``objective`` is minimized."""
        if gram_penalty < 0:
            raise SosError("gram_penalty must be nonnegative")
        c = np.zeros(self._n_free)
        if isinstance(objective, AffinePolyExpr):
            raise SosError("objective must be a linear functional over slots")
        for s, w in (objective or {}).items():
            if not 0 <= s < self._n_free:
                raise SosError(f"objective references undeclared slot {s}")
            c[s] += w

        def arr(rows, k, dtype):
            return np.array([r[k] for r in rows], dtype=dtype)

        g = sorted(self._g, key=lambda r: (r[0], r[1], r[2], r[3]))
        f = sorted(self._f, key=lambda r: (r[0], r[1]))
        return SdpProblem(
            n_free=self._n_free,
            c=c,
            free_labels=list(self._free_labels),
            block_sizes=list(self._block_sizes),
            block_labels=list(self._block_labels),
            b=np.array(self._b, dtype=float),
            gram_rows=arr(g, 0, np.int64), gram_blocks=arr(g, 1, np.int64),
            gram_i=arr(g, 2, np.int64), gram_j=arr(g, 3, np.int64), gram_vals=arr(g, 4, float),
            free_rows=arr(f, 0, np.int64), free_cols=arr(f, 1, np.int64), free_vals=arr(f, 2, float),
            decisions=dict(self.decisions),
            constraints=list(self.constraints),
            gram_penalty=float(gram_penalty),
        )


def linear_functional(dp: DecisionPolynomial, weights: Sequence[float]) -> dict[int, float]:
    if len(weights) != dp.size:
        raise SosError(f"{dp.name}: {len(weights)} weights for {dp.size} slots")
    return {dp.offset + k: float(w) for k, w in enumerate(weights) if w != 0.0}


# -- solution side ----------------------------------------------------------------

@dataclass
class SosSolution:
    """Free-variable values and Gram matrices recovered from an SDP solve."""

    free: np.ndarray
    grams: list[np.ndarray]
    status: object
    objective: float
    raw: object = None


def reconstruct(sol: SosSolution | np.ndarray, dp: DecisionPolynomial) -> Polynomial:
    values = sol.free if isinstance(sol, SosSolution) else np.asarray(sol)
    if len(values) < dp.offset + dp.size:
        raise SosError(f"solution has no values for slots of {dp.name!r}")
    return dp.evaluate(values)


@dataclass
class BlockCheck:
    name: str
    identity_residual: float  # max over points of |expr - sum| / (1 + |expr|)
    min_scaled_eig: float     # min over Grams of lambda_min / (1 + trace)
    min_scaled_expr: float    # min over in-set points of expr / (1 + |expr|)
    in_set_points: int

    def ok(self, identity_tol: float = 1e-6, eig_tol: float = 1e-7, sound_tol: float = 1e-6) -> bool:
        return (self.identity_residual <= identity_tol and self.min_scaled_eig >= -eig_tol
                and self.min_scaled_expr >= -sound_tol)


def _sample_in_set(block: SosConstraintBlock, n: int, rng: np.random.Generator,
                   max_tries: int = 200) -> dict[str, np.ndarray]:
    """Uniform samples from the constraint's box, projected onto equalities, filtered by inequalities."""
    names = list(block.variables)
    lo = np.array([block.box.get(v, (-1.0, 1.0))[0] for v in names])
    hi = np.array([block.box.get(v, (-1.0, 1.0))[1] for v in names])
    got: list[np.ndarray] = []
    total = 0
    for _ in range(max_tries):
        pts = rng.uniform(lo, hi, size=(max(4 * n, 64), len(names)))
        if block.eqs:
            pts = _project_onto(block.eqs, names, pts)
            pts = pts[np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=1)]
        vals = {v: pts[:, i] for i, v in enumerate(names)}
        keep = np.ones(len(pts), dtype=bool)
        for h in block.ineqs:
            keep &= h.eval_many(vals) >= 0
        for g in block.eqs:
            keep &= np.abs(g.eval_many(vals)) <= 1e-9
        got.append(pts[keep])
        total += int(keep.sum())
        if total >= n:
            break
    pts = np.concatenate(got)[:n] if got else np.zeros((0, len(names)))
    return {v: pts[:, i] for i, v in enumerate(names)}


def _gram_values(basis: Sequence[Exponents], space: VarSpace, vals: Mapping[str, np.ndarray],
                 G: np.ndarray) -> np.ndarray:
    Z = np.stack([Polynomial(space, {e: 1.0}).eval_many(vals) for e in basis], axis=1)
    return np.einsum("pi,ij,pj->p", Z, G, Z)


def check_block(block: SosConstraintBlock, sol: SosSolution, points: int = 200, seed: int = 0,
                sound_points: int = 500) -> BlockCheck:
    """Certificate identity, Gram PSD, and pointwise nonnegativity for one block."""
    rng = np.random.default_rng(seed)
    space = block.expr.space
    names = list(block.variables)
    expr = block.expr.evaluate(sol.free)

    # identity: sampled in the box (the identity holds everywhere)
    lo = np.array([block.box.get(v, (-1.0, 1.0))[0] for v in names])
    hi = np.array([block.box.get(v, (-1.0, 1.0))[1] for v in names])
    pts = rng.uniform(lo, hi, size=(points, len(names)))
    vals = {v: pts[:, i] for i, v in enumerate(names)}
    vals["__n__"] = np.zeros(points)
    e_val = expr.eval_many(vals)
    total = np.zeros(points)
    for gt in block.grams:
        total = total + gt.multiplier.eval_many(vals) * _gram_values(gt.basis, space, vals, sol.grams[gt.block])
    for ft in block.free_terms:
        total = total + ft.factor.eval_many(vals) * ft.multiplier.evaluate(sol.free).eval_many(vals)
    ident = float(np.max(np.abs(e_val - total) / (1.0 + np.abs(e_val)))) if points else 0.0

    eig = np.inf
    for gt in block.grams:
        G = sol.grams[gt.block]
        lam = float(np.linalg.eigvalsh(0.5 * (G + G.T))[0]) if G.size else 0.0
        eig = min(eig, lam / (1.0 + float(np.trace(G))))

    inset = _sample_in_set(block, sound_points, rng)
    n_in = len(next(iter(inset.values()))) if inset else (1 if not names else 0)
    inset["__n__"] = np.zeros(n_in)
    ev = expr.eval_many(inset)
    sound = float(np.min(ev / (1.0 + np.abs(ev)))) if n_in else np.inf
    return BlockCheck(block.name, ident, eig, sound, n_in)


def check_certificate(problem: SdpProblem, sol: SosSolution, points: int = 200, seed: int = 0,
                      sound_points: int = 500) -> list[BlockCheck]:
    return [check_block(b, sol, points, seed + k, sound_points) for k, b in enumerate(problem.constraints)]
