from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubrs.poly import (
    Polynomial,
    PolynomialSyntaxError,
    UniformBoxDistribution,
    VarSpace,
    affine_rescale,
    integrate_uniform,
    inverse_maps,
    lebesgue_moments,
    lie_derivative,
    monomial_basis,
    parse_polynomial,
    uniform_moment,
)

S = VarSpace(["x", "y", "th"])

coeffs = st.floats(min_value=-5, max_value=5, allow_nan=False).map(lambda c: round(c, 3))
exps = st.tuples(*(st.integers(0, 3) for _ in range(3)))
polys = st.dictionaries(exps, coeffs, max_size=6).map(lambda d: Polynomial(S, d))
points = st.fixed_dictionaries({n: st.floats(-1.5, 1.5) for n in S.names})


def test_basis_is_graded_lex():
    sp = VarSpace(["a", "b"])
    basis = monomial_basis(sp, ["a", "b"], 2)
    assert basis == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]


def test_basis_size_matches_binomial():
    from math import comb
    for n, d in [(1, 5), (2, 4), (3, 6), (4, 3)]:
        sp = VarSpace([f"v{i}" for i in range(n)])
        assert len(monomial_basis(sp, sp.names, d)) == comb(n + d, d)


def test_format_and_parse_fixed():
    p = parse_polynomial(S, "3.5*x^2*th - 0.7*x + 1 - y^3")
    assert str(p) == "3.5*x^2*th - y^3 - 0.7*x + 1"
    assert parse_polynomial(S, str(p)) == p


def test_parse_accepts_parentheses_and_power_operator():
    p = parse_polynomial(S, "(x + y)**2 / 2")
    assert p == parse_polynomial(S, "0.5*x^2 + x*y + 0.5*y^2")


@pytest.mark.parametrize("text", ["", "x +", "z*x", "x^-1", "x^0.5", "x/y", "sin(x)", "True"])
def test_parse_rejects(text):
    with pytest.raises(PolynomialSyntaxError):
        parse_polynomial(S, text)


def test_zero_coefficients_dropped():
    p = Polynomial(S, {(1, 0, 0): 0.0, (0, 1, 0): 2.0})
    assert list(p.terms) == [(0, 1, 0)]
    assert str(Polynomial.zero(S)) == "0"


def test_space_mismatch_raises():
    q = Polynomial.var(VarSpace(["x"]), "x")
    with pytest.raises(ValueError):
        Polynomial.var(S, "x") + q


def test_lie_derivative_of_quadratic():
    sp = VarSpace(["t", "x", "th"])
    v = parse_polynomial(sp, "t*x^2")
    f = {"x": parse_polynomial(sp, "-0.7*x + 0.2*th - 0.1")}
    got = lie_derivative(v, f)
    assert got == parse_polynomial(sp, "x^2 + 2*t*x*(-0.7*x + 0.2*th - 0.1)")


def test_uniform_moments_fixed():
    assert uniform_moment(0.2, 1.0, 1) == pytest.approx(0.6)
    assert uniform_moment(-1.0, 1.0, 2) == pytest.approx(1.0 / 3.0)
    assert uniform_moment(-1.0, 1.0, 3) == pytest.approx(0.0)


def test_integrate_uniform_removes_parameter():
    p = parse_polynomial(S, "x*th^2 + th")
    dist = UniformBoxDistribution.from_box(["th"], [[0.0, 1.0]])
    assert integrate_uniform(p, dist).allclose(parse_polynomial(S, "x/3 + 0.5"))


def test_lebesgue_moments_fixed():
    sp = VarSpace(["x", "y"])
    m = lebesgue_moments(sp, {"x": (-1.0, 1.0), "y": (0.0, 2.0)}, 2)
    # 1, x, y, x^2, xy, y^2
    np.testing.assert_allclose(m, [4.0, 0.0, 4.0, 4.0 / 3.0, 0.0, 16.0 / 3.0])


@given(polys, polys, points)
def test_ring_operations_match_evaluation(p, q, pt):
    lhs = (p * q + p - q)(pt)
    rhs = p(pt) * q(pt) + p(pt) - q(pt)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


@given(polys)
def test_text_roundtrip_is_exact(p):
    assert parse_polynomial(S, str(p)) == p


@given(polys, points)
def test_affine_rescale_inverse(p, pt):
    maps = {"x": (0.5, 0.2), "y": (2.0, -1.0)}
    back = affine_rescale(affine_rescale(p, maps), inverse_maps(maps))
    assert back(pt) == pytest.approx(p(pt), rel=1e-8, abs=1e-8)


@given(polys, st.floats(-1, 1), st.floats(-1, 1))
def test_diff_matches_finite_difference(p, a, b):
    h = 1e-6
    pt = {"x": a, "y": b, "th": 0.3}
    up, dn = dict(pt, x=a + h), dict(pt, x=a - h)
    fd = (p(up) - p(dn)) / (2 * h)
    assert p.diff("x")(pt) == pytest.approx(fd, rel=1e-5, abs=1e-5)


@given(polys)
@settings(max_examples=50)
def test_eval_many_agrees_with_scalar_eval(p):
    rng = np.random.default_rng(1)
    vals = {n: rng.uniform(-1, 1, 7) for n in S.names}
    many = p.eval_many(vals)
    single = [p({n: vals[n][i] for n in S.names}) for i in range(7)]
    np.testing.assert_allclose(many, single, rtol=1e-10, atol=1e-10)


@given(polys, polys)
@settings(max_examples=50)
def test_compose_matches_substitution(p, q):
    pt = {"x": 0.3, "y": -0.4, "th": 0.9}
    composed = p.compose({"x": q})
    assert composed(pt) == pytest.approx(p(dict(pt, x=q(pt))), rel=1e-8, abs=1e-8)
