from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_sdp
from ubrs.poly import VarSpace, parse_polynomial
from ubrs.sdp import (
    SdpaFormatError,
    SdpStandardForm,
    SolverOptions,
    StandardFormError,
    Status,
    export_sdpa,
    import_sdpa,
    solve,
    to_standard_form,
)
from ubrs.sos import SosProgram


def trace_two() -> SdpStandardForm:
    """min trace X s.t. trace X = 2 on a 2x2 block, written as max <-I, X>."""
    return SdpStandardForm(1, (2,), [2.0], [0, 0, 1, 1], [0, 0, 0, 0], [0, 1, 0, 1], [0, 1, 0, 1],
                           [-1.0, -1.0, 1.0, 1.0])


def offdiag_pencil() -> SdpStandardForm:
    """min c s.t. c*I + [[0,1],[1,0]] PSD (dual side); optimum c = 1."""
    return SdpStandardForm(1, (2,), [1.0], [0, 1, 1], [0, 0, 0], [0, 0, 1], [1, 0, 1], [-1.0, 1.0, 1.0])


def test_trace_two_micro_sdp():
    sol = solve(trace_two())
    assert sol.status == Status.OPTIMAL
    assert -sol.primal_objective == pytest.approx(2.0, abs=1e-8)
    assert sol.dual_objective == pytest.approx(-2.0, abs=1e-8)


def test_offdiag_pencil_micro_sdp():
    sol = solve(offdiag_pencil())
    assert sol.status == Status.OPTIMAL
    assert sol.y[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.dual_objective == pytest.approx(1.0, abs=1e-8)


def test_infeasible_trace():
    sf = SdpStandardForm(1, (2,), [-1.0], [1, 1], [0, 0], [0, 1], [0, 1], [1.0, 1.0])
    assert solve(sf).status == Status.INFEASIBLE


def test_unbounded_primal():
    # max x11 subject to x22 = 1: x11 grows without bound
    sf = SdpStandardForm(1, (2,), [1.0], [0, 1], [0, 0], [0, 1], [0, 1], [1.0, 1.0])
    assert solve(sf).status in (Status.UNBOUNDED, Status.SLOW_PROGRESS)


def test_diagonal_block_lp():
    # max x1 + 2 x2 s.t. x1 + x2 = 1, x >= 0  ->  2
    sf = SdpStandardForm(1, (-2,), [1.0], [0, 0, 1, 1], [0, 0, 0, 0], [0, 1, 0, 1], [0, 1, 0, 1],
                         [1.0, 2.0, 1.0, 1.0])
    sol = solve(sf)
    assert sol.status == Status.OPTIMAL
    assert sol.primal_objective == pytest.approx(2.0, abs=1e-8)


def test_kkt_invariants_at_optimum():
    rng = np.random.default_rng(3)
    sf, opt = random_sdp(rng)
    tol = SolverOptions().tolerance
    sol = solve(sf)
    assert sol.status == Status.OPTIMAL
    assert sol.primal_infeasibility <= tol
    for X, S in zip(sol.X, sol.S):
        assert np.linalg.eigvalsh(X).min() >= -tol * (1 + np.trace(X))
        assert np.linalg.eigvalsh(S).min() >= -tol * (1 + np.trace(S))
    assert abs(sol.primal_objective - sol.dual_objective) <= tol * (1 + abs(sol.dual_objective)) * 10


def test_solver_is_deterministic():
    sf, _ = random_sdp(np.random.default_rng(11))
    a, b = solve(sf), solve(sf)
    assert a.primal_objective == b.primal_objective
    assert np.array_equal(a.y, b.y)


def test_trace_two_sdpa_text():
    text = export_sdpa(trace_two())
    assert text == "1\n1\n2\n2\n0 1 1 1 -1\n0 1 2 2 -1\n1 1 1 1 1\n1 1 2 2 1\n"


def test_sdpa_tolerant_reader():
    text = '" comment\n* another\n1\n1\n{2}\n(2.0)\n\n0,1,1,1,-1\n0 1 2 2 -1\n1 1 1 1 1\n1 1 2 2   1\n'
    assert import_sdpa(text).equals(trace_two())


@pytest.mark.parametrize("text, message", [
    ("1\n1\n2\n", "four header lines"),
    ("1\n1\n2\n2\n0 1 3 3 1\n", "line 5: index \\(3,3\\) outside block 1"),
    ("1\n1\n2\n2\n0 1 1 1\n", "line 5: expected 'matno block i j value'"),
    ("1\n1\n-2\n2\n0 1 1 2 1\n", "off-diagonal entry in diagonal block"),
    ("1\n1\n2\n2\n4 1 1 1 1\n", "matrix number 4 out of range"),
    ("1\n1\nx\n2\n", "line 3: expected integers"),
])
def test_sdpa_reader_errors(text, message):
    with pytest.raises(SdpaFormatError, match=message):
        import_sdpa(text)


def test_export_needs_constraints():
    with pytest.raises(StandardFormError):
        export_sdpa(SdpStandardForm(0, (1,), [], [], [], [], [], []))


@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_sdpa_roundtrip_byte_stable(seed, n, m):
    sf, _ = random_sdp(np.random.default_rng(seed), sizes=(n, 2), m=m)
    text = export_sdpa(sf)
    back = import_sdpa(text)
    assert back.equals(sf)
    assert export_sdpa(back) == text


def test_standard_form_of_single_gram():
    prog = SosProgram()
    x = VarSpace(["x"])
    prog.require_in_quadratic_module(parse_polynomial(x, "4"), ["x"], degree=0, name="c")
    sf = to_standard_form(prog.assemble())
    assert sf.m == 1 and sf.block_sizes == (1,)
    sol = solve(sf)
    assert sol.X[0][0, 0] == pytest.approx(4.0, abs=1e-8)


def test_standard_form_rejects_empty_problem():
    with pytest.raises(StandardFormError):
        to_standard_form(SosProgram().assemble())
