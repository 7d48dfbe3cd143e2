from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubrs.model import load_model
from ubrs.relax import (
    Certificate,
    ModeCertificate,
    RelaxError,
    RelaxOptions,
    Variant,
    build,
    grid_points,
    sample_levelset,
    solve_relaxation,
)
from ubrs.poly import VarSpace, parse_polynomial
from ubrs.sdp import Status, export_sdpa, import_sdpa, to_standard_form
from ubrs.sos import check_certificate

DATA = Path(__file__).resolve().parents[1] / "src" / "ubrs" / "data"


@pytest.fixture(scope="module")
def ex1():
    return load_model(DATA / "ex1_linear.json")


@pytest.fixture(scope="module")
def ex1_d4(ex1):
    return solve_relaxation(ex1, RelaxOptions(4))


@pytest.mark.parametrize("kwargs, message", [
    (dict(degree=7), "degree must be even"),
    (dict(degree=0), "degree must be even"),
    (dict(degree=4, variant="alpha"), "alpha must lie in"),
    (dict(degree=4, variant="alpha", alpha=1.5), "alpha must lie in"),
    (dict(degree=4, alpha=0.5), "only meaningful"),
    (dict(degree=4, gram_penalty=-1.0), "nonnegative"),
])
def test_option_errors(kwargs, message):
    with pytest.raises(RelaxError, match=message):
        RelaxOptions(**kwargs)


def test_unknown_variant():
    with pytest.raises(ValueError):
        RelaxOptions(4, "sideways")


def test_alpha_requires_single_mode():
    model = load_model(DATA / "logistic_inner.json")
    with pytest.raises(RelaxError, match="alpha variant requires single mode"):
        build(model, RelaxOptions(4, "alpha", 0.9))


def test_ex1_d4_structure(ex1):
    relax = build(ex1, RelaxOptions(4))
    names = [c.name for c in relax.problem.constraints]
    assert names == ["mode1:w_nonneg", "mode1:terminal", "mode1:flow", "mode1:initial"]
    # one s0 per family plus one multiplier per set inequality
    assert [c.gram_sizes for c in relax.problem.constraints] == [[3, 2], [6, 3, 3, 3, 3], [10, 4, 4, 4], [3, 2]]
    sf = to_standard_form(relax.problem)
    assert sf.m == 60
    assert len(relax.problem.block_sizes) == 13
    assert import_sdpa(export_sdpa(sf)).equals(sf)


def test_ex1_d4_solution(ex1_d4):
    cert = ex1_d4.certificate
    assert cert.status == Status.OPTIMAL.value
    # frozen from this solver build; the true BRS length is about 0.171
    assert cert.objective == pytest.approx(1.0332463, abs=1e-5)
    assert 0.171 < cert.objective < 2.0
    assert all(c.ok() for c in check_certificate(ex1_d4.relaxation.problem, ex1_d4.solution))


def test_certificate_json_roundtrip_byte_stable(ex1_d4):
    text = ex1_d4.certificate.dumps()
    again = Certificate.loads(text)
    assert again.dumps() == text
    assert json.loads(text)["modes"][0]["vars"] == ["t", "x", "th"]


@pytest.mark.parametrize("text", ["{", '{"variant": "outer"}', '{"variant": "nope", "degree": 2, "status": "x",'
                                  ' "objective": 0, "q": 0, "modes": []}'])
def test_corrupted_certificate_rejected(text):
    with pytest.raises(RelaxError, match="malformed certificate"):
        Certificate.loads(text)


def test_levelset_from_certificate_alone_matches_model_grid(ex1, ex1_d4):
    cert = ex1_d4.certificate
    a = sample_levelset(cert, ex1, 1, 201)
    b = sample_levelset(cert, None, 1, 201)
    assert a.to_csv() == b.to_csv()
    assert a.labels == ["inside"]
    assert a.column("inside").sum() == 52


def test_levelset_grid_outside_box(ex1, ex1_d4):
    with pytest.raises(RelaxError, match="grid outside the box"):
        sample_levelset(ex1_d4.certificate, ex1, 1, axes=[np.linspace(-2, 2, 5)])


def test_grid_points_layout():
    axes, pts = grid_points([[0, 1], [-1, 1]], [2, 3])
    assert pts.tolist() == [[0, -1], [0, 0], [0, 1], [1, -1], [1, 0], [1, 1]]


def _toy_cert(variant, q, alpha=None):
    sp = VarSpace(["t", "x"])
    mc = ModeCertificate(parse_polynomial(sp, "2*x^2"), parse_polynomial(sp, "t"))
    cert = Certificate(Variant(variant), 2, "Optimal", 1.0, q, {1: mc},
                       scaling={"horizon": 1.0, "modes": {"1": {"state": {"x": [1.0, 0.0]}, "theta": {}}}})
    if variant == "alpha":
        cert.alpha, cert.tau1, cert.tau2 = alpha, 1 + q * (1 - alpha), 1 - q * alpha
    return cert


@given(st.floats(0.0, 50.0), st.floats(0.01, 1.0))
@settings(max_examples=40)
def test_alpha_levels_are_nested(q, alpha):
    grid = sample_levelset(_toy_cert("alpha", q, alpha), None, 1, 41)
    s1, s2 = grid.column("in_S1"), grid.column("in_S2")
    assert np.all(~s1 | s2)


def test_inner_classification_is_strict_sublevel():
    grid = sample_levelset(_toy_cert("inner", 0.0), None, 1, 5)
    # w = 2 x^2 on {-1, -0.5, 0, 0.5, 1}: w < 1 at the middle three
    assert grid.column("inside").tolist() == [False, True, True, True, False]
    outer = sample_levelset(_toy_cert("outer", 0.0), None, 1, 5)
    assert outer.column("inside").tolist() == [True, False, False, False, True]


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(-1e3, 1e3, allow_nan=False))
@settings(max_examples=40)
def test_certificate_text_roundtrip(obj, q):
    cert = _toy_cert("outer", q)
    cert.objective = obj
    text = cert.dumps()
    assert Certificate.loads(text).dumps() == text
