"""Sparse multivariate polynomials with float coefficients.

Monomials are dense exponent tuples over a :class:`VarSpace`; a polynomial
is an immutable mapping from exponent tuple to coefficient.  All ordering is
graded-lexicographic so that anything assembled from these objects is
reproducible term-for-term.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Iterable, Mapping, Sequence

import numpy as np

Exponents = tuple[int, ...]


class VarSpace:
    """Ordered set of variable names shared by a family of polynomials."""

    __slots__ = ("names", "_index")

    def __init__(self, names: Iterable[str]):
        self.names = tuple(names)
        self._index = {n: i for i, n in enumerate(self.names)}
        if len(self._index) != len(self.names):
            raise ValueError(f"duplicate variable names in {self.names}")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, VarSpace) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"VarSpace({list(self.names)!r})"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"variable {name!r} not in {self.names}") from None

    def zero_exponents(self) -> Exponents:
        return (0,) * len(self.names)

    def unit(self, name: str) -> Exponents:
        e = [0] * len(self.names)
        e[self.index(name)] = 1
        return tuple(e)


def grlex_key(e: Exponents) -> tuple:
    """Sort key: total degree first, then lexicographic with x1 > x2 > ..."""
    return (sum(e), tuple(-k for k in e))


def monomial_basis(space: VarSpace, variables: Sequence[str], degree: int) -> list[Exponents]:
    """All monomials in ``variables`` of total degree <= ``degree``, graded-lex."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    idx = [space.index(v) for v in variables]
    out: list[Exponents] = []
    for deg in range(degree + 1):
        block = []
        for combo in combinations_with_replacement(idx, deg):
            e = [0] * len(space)
            for i in combo:
                e[i] += 1
            block.append(tuple(e))
        block.sort(key=grlex_key)
        out.extend(block)
    return out


class Polynomial:
    """Immutable sparse polynomial over a :class:`VarSpace`.

    Zero coefficients are dropped on construction.  Arithmetic between
    polynomials on different spaces raises ``ValueError``.
    """

    __slots__ = ("space", "terms")

    def __init__(self, space: VarSpace, terms: Mapping[Exponents, float] | None = None,
                 prune: float = 0.0):
        self.space = space
        clean: dict[Exponents, float] = {}
        if terms:
            n = len(space)
            for e, c in terms.items():
                if len(e) != n:
                    raise ValueError(f"exponent {e} does not match space {space.names}")
                c = float(c)
                if c != 0.0 and abs(c) > prune:
                    clean[tuple(e)] = c
        self.terms = clean

    # -- constructors -------------------------------------------------------
    @classmethod
    def constant(cls, space: VarSpace, c: float) -> Polynomial:
        return cls(space, {space.zero_exponents(): c})

    @classmethod
    def var(cls, space: VarSpace, name: str) -> Polynomial:
        return cls(space, {space.unit(name): 1.0})

    @classmethod
    def zero(cls, space: VarSpace) -> Polynomial:
        return cls(space)

    @classmethod
    def parse(cls, space: VarSpace, text: str) -> Polynomial:
        return parse_polynomial(space, text)

    # -- inspection ---------------------------------------------------------
    def degree(self) -> int:
        """Maximum total degree; the zero polynomial has degree -1."""
        return max((sum(e) for e in self.terms), default=-1)

    def is_zero(self) -> bool:
        return not self.terms

    def used_vars(self) -> list[str]:
        used = set()
        for e in self.terms:
            used.update(i for i, k in enumerate(e) if k)
        return [self.space.names[i] for i in sorted(used)]

    def coefficient(self, e: Exponents) -> float:
        return self.terms.get(tuple(e), 0.0)

    def sorted_terms(self, descending: bool = False) -> list[tuple[Exponents, float]]:
        """Graded-lex order; ``descending`` flips only the degree, so x1 leads x2 either way."""
        if descending:
            return sorted(self.terms.items(), key=lambda kv: (-sum(kv[0]), tuple(-k for k in kv[0])))
        return sorted(self.terms.items(), key=lambda kv: grlex_key(kv[0]))

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def __repr__(self) -> str:
        return f"Polynomial({self})"

    def __str__(self) -> str:
        return format_polynomial(self)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.space, other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.space == other.space and self.terms == other.terms

    def __hash__(self) -> int:
        return hash((self.space, tuple(self.sorted_terms())))

    def allclose(self, other: Polynomial, atol: float = 1e-12) -> bool:
        self._check(other)
        keys = set(self.terms) | set(other.terms)
        return all(abs(self.terms.get(k, 0.0) - other.terms.get(k, 0.0)) <= atol for k in keys)

    # -- ring operations ----------------------------------------------------
    def _check(self, other: Polynomial) -> None:
        if self.space != other.space:
            raise ValueError(f"mismatched variable spaces {self.space.names} vs {other.space.names}")

    def _coerce(self, other) -> Polynomial:
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.space, float(other))
        return NotImplemented

    def __add__(self, other) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) + c
        return Polynomial(self.space, out)

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return Polynomial(self.space, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other) -> Polynomial:
        return (-self) + other

    def scale(self, a: float) -> Polynomial:
        a = float(a)
        return Polynomial(self.space, {e: a * c for e, c in self.terms.items()})

    def __mul__(self, other) -> Polynomial:
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(other)
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out: dict[Exponents, float] = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0.0) + c1 * c2
        return Polynomial(self.space, out)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> Polynomial:
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("power must be a nonnegative integer")
        result = Polynomial.constant(self.space, 1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result

    # -- calculus and substitution -----------------------------------------
    def diff(self, name: str) -> Polynomial:
        i = self.space.index(name)
        out: dict[Exponents, float] = {}
        for e, c in self.terms.items():
            k = e[i]
            if k:
                e2 = e[:i] + (k - 1,) + e[i + 1:]
                out[e2] = out.get(e2, 0.0) + c * k
        return Polynomial(self.space, out)

    def compose(self, subs: Mapping[str, Polynomial], target: VarSpace | None = None) -> Polynomial:
        """Substitute variables by polynomials and expand.

        Variables absent from ``subs`` map to the same-named variable of the
        target space (identity), which must then exist there.
        """
        if target is None:
            target = next(iter(subs.values())).space if subs else self.space
        images: list[Polynomial | None] = []
        for name in self.space.names:
            if name in subs:
                img = subs[name]
                if img.space != target:
                    raise ValueError(f"image of {name!r} lives on {img.space.names}, expected {target.names}")
                images.append(img)
            else:
                images.append(None)
        powers: dict[tuple[int, int], Polynomial] = {}

        def power(i: int, k: int) -> Polynomial:
            key = (i, k)
            if key not in powers:
                img = images[i]
                if img is None:
                    img = Polynomial.var(target, self.space.names[i])
                powers[key] = img if k == 1 else power(i, k - 1) * img
            return powers[key]

        out: dict[Exponents, float] = {}
        for e, c in self.terms.items():
            term = Polynomial.constant(target, c)
            for i, k in enumerate(e):
                if k:
                    term = term * power(i, k)
            for e2, c2 in term.terms.items():
                out[e2] = out.get(e2, 0.0) + c2
        return Polynomial(target, out)

    def subs_value(self, name: str, value: float) -> Polynomial:
        """Fix one variable to a number, keeping the space."""
        i = self.space.index(name)
        out: dict[Exponents, float] = {}
        for e, c in self.terms.items():
            k = e[i]
            e2 = e[:i] + (0,) + e[i + 1:]
            out[e2] = out.get(e2, 0.0) + c * value ** k
        return Polynomial(self.space, out)

    def to_space(self, target: VarSpace) -> Polynomial:
        """Re-express on another space by variable name (unused vars may be absent)."""
        used = self.used_vars()
        missing = [v for v in used if v not in target]
        if missing:
            raise ValueError(f"variables {missing} missing from target space {target.names}")
        idx = [target.index(n) if n in target else -1 for n in self.space.names]
        out: dict[Exponents, float] = {}
        n = len(target)
        for e, c in self.terms.items():
            e2 = [0] * n
            for i, k in enumerate(e):
                if k:
                    e2[idx[i]] = k
            key = tuple(e2)
            out[key] = out.get(key, 0.0) + c
        return Polynomial(target, out)

    # -- evaluation ----------------------------------------------------------
    def __call__(self, point: Mapping[str, float]) -> float:
        return self.eval(point)

    def eval(self, point: Mapping[str, float]) -> float:
        """Evaluate at a point; terms are accumulated with ``math.fsum``."""
        used = self.used_vars()
        missing = [v for v in used if v not in point]
        if missing:
            raise KeyError(f"unassigned variables {missing}")
        vals = [float(point[n]) if n in point else 0.0 for n in self.space.names]
        parts = []
        for e, c in self.terms.items():
            t = c
            for i, k in enumerate(e):
                if k:
                    t *= vals[i] ** k
            parts.append(t)
        return math.fsum(parts)

    def eval_many(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        """Vectorized evaluation; every array in ``values`` must share a shape.

        Each output entry depends only on the matching input entries, so
        results do not change with batch composition.
        """
        used = self.used_vars()
        missing = [v for v in used if v not in values]
        if missing:
            raise KeyError(f"unassigned variables {missing}")
        shape = np.shape(next(iter(values.values()))) if values else ()
        out = np.zeros(shape)
        if not self.terms:
            return out
        cache: dict[tuple[int, int], np.ndarray] = {}

        def power(i: int, k: int) -> np.ndarray:
            key = (i, k)
            if key not in cache:
                base = np.asarray(values[self.space.names[i]], dtype=float)
                cache[key] = base if k == 1 else power(i, k - 1) * base
            return cache[key]

        for e, c in self.sorted_terms():
            t = np.full(shape, c)
            for i, k in enumerate(e):
                if k:
                    t = t * power(i, k)
            out = out + t
        return out


# -- free functions mirroring the operator vocabulary --------------------------

def differentiate(p: Polynomial, name: str) -> Polynomial:
    return p.diff(name)


def compose(p: Polynomial, subs: Mapping[str, Polynomial], target: VarSpace | None = None) -> Polynomial:
    return p.compose(subs, target)


def lie_derivative(v: Polynomial, f: Mapping[str, Polynomial], time_var: str | None = "t") -> Polynomial:
    """dv/dt + sum_i dv/dx_i * f_i.  Variables not in ``f`` (parameters) have zero flow."""
    out = v.diff(time_var) if time_var is not None else Polynomial.zero(v.space)
    for name, fi in f.items():
        if fi.space != v.space:
            raise ValueError(f"dynamics for {name!r} on {fi.space.names}, expected {v.space.names}")
        out = out + v.diff(name) * fi
    return out


@dataclass(frozen=True)
class UniformBoxDistribution:
    """Uniform probability measure on a box, one interval per variable."""

    intervals: tuple[tuple[str, float, float], ...]

    def __post_init__(self):
        for name, a, b in self.intervals:
            if not a < b:
                raise ValueError(f"degenerate interval for {name}: [{a}, {b}]")

    @classmethod
    def from_box(cls, names: Sequence[str], box: Sequence[Sequence[float]]) -> UniformBoxDistribution:
        return cls(tuple((n, float(lo), float(hi)) for n, (lo, hi) in zip(names, box)))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _, _ in self.intervals)

    def moment(self, name: str, k: int) -> float:
        for n, a, b in self.intervals:
            if n == name:
                return uniform_moment(a, b, k)
        raise KeyError(name)


def uniform_moment(a: float, b: float, k: int) -> float:
    """E[x^k] for x ~ U([a, b])."""
    if k == 0:
        return 1.0
    return (b ** (k + 1) - a ** (k + 1)) / ((k + 1) * (b - a))


def integrate_uniform(p: Polynomial, dist: UniformBoxDistribution) -> Polynomial:
    """Integrate out the distribution's variables; result keeps p's space."""
    idx = [(p.space.index(n), a, b) for n, a, b in dist.intervals]
    out: dict[Exponents, float] = {}
    for e, c in p.terms.items():
        e2 = list(e)
        for i, a, b in idx:
            k = e[i]
            if k:
                c *= uniform_moment(a, b, k)
                e2[i] = 0
        key = tuple(e2)
        out[key] = out.get(key, 0.0) + c
    return Polynomial(p.space, out)


def lebesgue_moments(space: VarSpace, box: Mapping[str, tuple[float, float]], degree: int) -> np.ndarray:
    """Unnormalized Lebesgue moments over a box, indexed by ``monomial_basis``."""
    names = list(box)
    basis = monomial_basis(space, names, degree)
    idx = [(space.index(n), *box[n]) for n in names]
    out = np.empty(len(basis))
    for r, e in enumerate(basis):
        m = 1.0
        for i, a, b in idx:
            k = e[i]
            m *= (b ** (k + 1) - a ** (k + 1)) / (k + 1)
        out[r] = m
    return out


def affine_rescale(p: Polynomial, maps: Mapping[str, tuple[float, float]]) -> Polynomial:
    """Compose p with x -> c*x + m for each (name -> (c, m)) entry."""
    subs = {}
    for name, (c, m) in maps.items():
        if c == 0:
            raise ValueError(f"zero scale factor for {name!r}")
        subs[name] = Polynomial(p.space, {p.space.unit(name): c, p.space.zero_exponents(): m})
    return p.compose(subs, p.space)


def inverse_maps(maps: Mapping[str, tuple[float, float]]) -> dict[str, tuple[float, float]]:
    """Inverse of x -> c*x + m, i.e. x -> x/c - m/c."""
    return {n: (1.0 / c, -m / c) for n, (c, m) in maps.items()}


# -- text format --------------------------------------------------------------

def _fmt_coeff(c: float) -> str:
    if c.is_integer() and abs(c) < 1e15:
        return str(int(c))
    return repr(c)


def format_polynomial(p: Polynomial) -> str:
    """Render as ``3.5*x1^2*th1 - 0.7*x1 + 1``; terms in descending graded-lex order."""
    if not p.terms:
        return "0"
    parts: list[str] = []
    for e, c in p.sorted_terms(descending=True):
        factors = []
        for name, k in zip(p.space.names, e):
            if k == 1:
                factors.append(name)
            elif k > 1:
                factors.append(f"{name}^{k}")
        mag = abs(c)
        if factors:
            body = "*".join(factors) if mag == 1.0 else _fmt_coeff(mag) + "*" + "*".join(factors)
        else:
            body = _fmt_coeff(mag)
        if not parts:
            parts.append(("-" if c < 0 else "") + body)
        else:
            parts.append((" - " if c < 0 else " + ") + body)
    return "".join(parts)


class PolynomialSyntaxError(ValueError):
    pass


def parse_polynomial(space: VarSpace, text: str) -> Polynomial:
    """Parse the textual form; also accepts parentheses and ``**``."""
    src = text.replace("^", "**").strip()
    if not src:
        raise PolynomialSyntaxError("empty polynomial string")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise PolynomialSyntaxError(f"cannot parse {text!r}: {exc.msg}") from None

    def walk(node) -> Polynomial:
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return Polynomial.constant(space, float(node.value))
        if isinstance(node, ast.Name):
            if node.id not in space:
                raise PolynomialSyntaxError(f"unknown variable {node.id!r} in {text!r}")
            return Polynomial.var(space, node.id)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = walk(node.operand)
            return -inner if isinstance(node.op, ast.USub) else inner
        if isinstance(node, ast.BinOp):
            if isinstance(node.op, ast.Pow):
                base = walk(node.left)
                exp = node.right
                if isinstance(exp, ast.Constant) and isinstance(exp.value, int) and exp.value >= 0:
                    return base ** exp.value
                raise PolynomialSyntaxError(f"exponent must be a nonnegative integer in {text!r}")
            left, right = walk(node.left), walk(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            if isinstance(node.op, ast.Mult):
                return left * right
            if isinstance(node.op, ast.Div) and right.degree() <= 0:
                return left.scale(1.0 / right.coefficient(space.zero_exponents()))
        raise PolynomialSyntaxError(f"unsupported syntax in {text!r}")

    return walk(tree.body)
