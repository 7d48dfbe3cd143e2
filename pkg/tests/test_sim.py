from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import linear_solution
from ubrs.model import load_model
from ubrs.relax import LevelSetGrid
from ubrs.sim import (
    Direction,
    McReport,
    SimOptions,
    SimulationError,
    Termination,
    check_containment,
    execute,
    integrate_segment,
    monte_carlo,
)

DATA = Path(__file__).resolve().parents[1] / "src" / "ubrs" / "data"


def sawtooth(horizon=3.5, reset="0"):
    return load_model({
        "name": "sawtooth", "horizon": horizon,
        "modes": [{"id": 1, "states": ["x"], "box": [[0.0, 1.0]], "dynamics": ["1"],
                   "target_ineqs": ["0.6 - x"]}],
        "edges": [{"from": 1, "to": 1, "guard_eqs": ["x - 1"], "reset": [reset]}],
    })


@pytest.fixture(scope="module")
def ex1():
    return load_model(DATA / "ex1_linear.json")


@given(st.floats(-1.0, 1.0), st.floats(0.2, 1.0))
@settings(max_examples=10, deadline=None)
def test_fixed_theta_matches_closed_form(x0, th):
    model = load_model(DATA / "ex1_linear.json")
    traj = execute(model, 1, [x0], options=SimOptions(step=5e-4, fixed_theta=(th,)))
    seg = traj.segments[0]
    t = np.array(seg.times)
    x = np.array(seg.states)[:, 0]
    exact = linear_solution(x0, th, t)
    # the flow contracts toward (2*th - 1)/7, so the box is never left
    assert traj.reason == Termination.HORIZON
    assert traj.terminal_time == 1.0
    assert np.max(np.abs(x - exact)) <= 1e-8


def test_sawtooth_event_times():
    traj = execute(sawtooth(), 1, [0.0], options=SimOptions(step=1e-3))
    times = [e.time for e in traj.events]
    assert len(times) == 3
    assert np.max(np.abs(np.array(times) - [1.0, 2.0, 3.0])) <= 1e-9
    assert traj.reason == Termination.HORIZON
    assert traj.terminal_state[0] == pytest.approx(0.5, abs=1e-9)


def test_start_on_guard_jumps_immediately():
    traj = execute(sawtooth(horizon=0.5), 1, [1.0])
    assert traj.events[0].time == 0.0
    assert traj.reason == Termination.HORIZON
    assert traj.terminal_state[0] == pytest.approx(0.5, abs=1e-9)


def test_reset_onto_guard_hits_event_limit():
    traj = execute(sawtooth(reset="1"), 1, [0.5], options=SimOptions(max_events=20))
    assert traj.reason == Termination.STEP_LIMIT
    assert len(traj.events) == 21


def test_leaving_the_box_stops_the_run():
    model = load_model({
        "name": "drift", "horizon": 1.0,
        "modes": [{"id": 1, "states": ["x"], "box": [[0.0, 1.0]], "dynamics": ["1"]}],
    })
    traj = execute(model, 1, [0.5])
    assert traj.reason == Termination.LEFT_DOMAIN
    assert traj.terminal_time == pytest.approx(0.5, abs=1e-3)


def test_simultaneous_guards_lowest_index_wins(caplog):
    model = load_model({
        "name": "tie", "horizon": 1.0,
        "modes": [{"id": 1, "states": ["x"], "box": [[0.0, 1.0]], "dynamics": ["1"]},
                  {"id": 2, "states": ["x"], "box": [[0.0, 1.0]], "dynamics": ["0"]},
                  {"id": 3, "states": ["x"], "box": [[0.0, 1.0]], "dynamics": ["0"]}],
        "edges": [{"from": 1, "to": 3, "guard_eqs": ["x - 0.5"], "reset": ["x"]},
                  {"from": 1, "to": 2, "guard_eqs": ["x - 0.5"], "reset": ["x"]}],
    })
    with caplog.at_level(logging.WARNING, logger="ubrs.sim"):
        traj = execute(model, 1, [0.0])
    assert traj.events[0].edge == 0
    assert traj.terminal_mode == 3
    assert "simultaneous guard hits" in caplog.text


def test_integrate_segment_stops_at_first_event():
    seg, ev, reason = integrate_segment(sawtooth(), 1, [0.25], [], t0=2.0)
    assert reason is None
    assert ev.time == pytest.approx(2.75, abs=1e-9)
    assert seg.times[0] == 2.0 and seg.times[-1] == pytest.approx(2.75, abs=1e-9)


def test_trajectory_csv_is_reproducible():
    model = load_model(DATA / "logistic_inner.json")
    a = execute(model, 2, [0.9], seed=3).to_csv()
    b = execute(model, 2, [0.9], seed=3).to_csv()
    assert a == b
    assert a.splitlines()[0] == "t,mode,x1,theta1"
    assert execute(model, 2, [0.9], seed=4).to_csv() != a


def test_bad_initial_state(ex1):
    with pytest.raises(SimulationError, match="initial state has 2 entries"):
        execute(ex1, 1, [0.1, 0.2])


def test_fixed_theta_length_checked(ex1):
    with pytest.raises(SimulationError, match="fixed theta has 2 entries"):
        execute(ex1, 1, [0.1], options=SimOptions(fixed_theta=(0.3, 0.4)))


def test_monte_carlo_deterministic_across_chunking(ex1, monkeypatch):
    a = monte_carlo(ex1, 1, 21, 10, seed=5)
    monkeypatch.setenv("UBRS_THREADS", "1")
    b = monte_carlo(ex1, 1, 21, 10, seed=5, chunk=70)
    assert a.to_csv() == b.to_csv()


def test_monte_carlo_ex1_endpoints(ex1):
    rep = monte_carlo(ex1, 1, 201, 50, eps=1e-3, seed=0)
    by_x = {round(float(p[0]), 3): int(s) for p, s in zip(rep.points, rep.successes)}
    assert by_x[0.55] == 50
    assert by_x[0.9] == 0
    assert int(rep.all_success.sum()) == 19


def test_epsilon_slack_admits_near_target_points():
    model = load_model({
        "name": "still", "horizon": 1.0,
        "modes": [{"id": 1, "states": ["x"], "box": [[-1.0, 1.0]], "dynamics": ["0"],
                   "target_ineqs": ["x"]}],
    })
    strict = monte_carlo(model, 1, axes=[np.array([-0.01, 0.0, 0.01])], trials=1, eps=0.0)
    loose = monte_carlo(model, 1, axes=[np.array([-0.01, 0.0, 0.01])], trials=1, eps=0.02)
    assert strict.successes.tolist() == [0, 1, 1]
    assert loose.successes.tolist() == [1, 1, 1]


def _report(points, succ, trials=4):
    pts = np.asarray(points, dtype=float)[:, None]
    return McReport(1, ("x",), [pts[:, 0]], pts, np.full(len(pts), trials), np.asarray(succ), 0.0, False, 0)


def _grid(points, w, inside):
    pts = np.asarray(points, dtype=float)[:, None]
    return LevelSetGrid(1, ("x",), [pts[:, 0]], pts, np.asarray(w, dtype=float), [1.0], ["inside"],
                        np.asarray(inside)[:, None])


def test_containment_verdicts():
    pts = [0.0, 0.5, 1.0]
    rep = _report(pts, [4, 4, 1])
    ok = check_containment(rep, _grid(pts, [1.2, 1.0 - 1e-7, 0.3], [True, False, False]), "OuterMustContain")
    assert ok.passed and ok.checked == 2
    bad = check_containment(rep, _grid(pts, [1.2, 0.5, 0.3], [True, False, False]), Direction.OUTER_MUST_CONTAIN)
    assert not bad.passed and bad.violations[0]["index"] == 1
    inner = check_containment(rep, _grid(pts, [0.2, 0.2, 0.2], [True, True, True]), "InnerMustBeContained")
    assert not inner.passed and [v["index"] for v in inner.violations] == [2]


def test_containment_grid_mismatch():
    with pytest.raises(SimulationError, match="grid mismatch"):
        check_containment(_report([0.0, 1.0], [1, 1]), _grid([0.0, 0.9], [1, 1], [1, 1]), "OuterMustContain")
