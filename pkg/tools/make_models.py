"""Regenerate the derived example model files (rimless wheel, compass gait).

Run from the repository root:  python3 tools/make_models.py
Needs sympy and scipy; the package itself does not.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import sympy as sp
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, fsolve

DATA = Path(__file__).resolve().parents[1] / "src" / "ubrs" / "data"


def fmt(expr) -> str:
    return str(sp.expand(expr)).replace("**", "^")


def rimless_wheel() -> dict:
    alpha, gamma = 0.4, 0.2
    k = math.cos(2 * alpha)
    b, db = sp.symbols("b db")
    # cubic Taylor model of sin(b); its conserved energy uses the matching cos series
    pot = 1 - b**2 / 2 + b**4 / 24
    energy = db**2 / 2 + pot
    lo, hi = gamma - alpha, gamma + alpha
    drop = float(pot.subs(b, lo) - pot.subs(b, hi))
    # flat-terrain fixed point of the stride map: w0^2 = k^2 (w0^2 + 2 drop)
    w0sq = k * k * 2 * drop / (1 - k * k)
    e_star = 0.5 * w0sq + float(pot.subs(b, lo))
    band = 0.02
    return {
        "name": "rimless_wheel",
        "description": (f"Rimless wheel, spoke half-angle {alpha}, slope {gamma}, cubic Taylor dynamics. "
                        f"Target: energy band |E - {e_star:.12g}| <= {band} around the flat-terrain "
                        f"limit cycle, restricted to b <= 0.45."),
        "horizon": 4.0,
        "modes": [{
            "id": 1,
            "states": ["b", "db"],
            "box": [[-0.3, 0.7], [0.2, 1.4]],
            "dynamics": ["db", "b - b^3/6"],
            "theta": {"vars": ["th"], "box": [[-0.1, 0.1]], "dist": "uniform"},
            "domain_ineqs": [f"{hi} + th - b"],
            "target_ineqs": [fmt(band - (energy - e_star)), fmt(band + (energy - e_star)), "0.45 - b"],
        }],
        "edges": [{
            "from": 1, "to": 1,
            "guard_eqs": [f"b - {hi} - th"],
            "reset": [f"{2 * gamma} - b", f"{k!r}*db"],
        }],
    }


def compass_gait() -> dict:
    mh, m, a, bb, g, gamma = 10.0, 5.0, 1.0, 1.0, 9.81, 0.05
    l = a + bb
    q1, q2, w1, w2 = sp.symbols("bsw bst dbsw dbst")
    M = sp.Matrix([[m * bb**2, -m * l * bb * sp.cos(q2 - q1)],
                   [-m * l * bb * sp.cos(q2 - q1), (mh + m) * l**2 + m * a**2]])
    C = sp.Matrix([[0, m * l * bb * sp.sin(q2 - q1) * w2],
                   [m * l * bb * sp.sin(q2 - q1) * w1, 0]])
    N = sp.Matrix([m * bb * g * sp.sin(q1), -(mh * l + m * a + m * l) * g * sp.sin(q2)])
    acc = M.LUsolve(-C * sp.Matrix([w1, w2]) - N)
    f_exact = sp.lambdify((q1, q2, w1, w2), [w1, w2, acc[0], acc[1]], "numpy")

    eps = sp.Symbol("eps")
    taylor = []
    for e in acc:
        s = e.subs({q1: eps * q1, q2: eps * q2, w1: eps * w1, w2: eps * w2})
        ser = sp.series(s, eps, 0, 6).removeO().subs(eps, 1)
        taylor.append(sp.expand(ser))

    def reset(x):
        b1, b2, d1, d2 = x
        al = (b1 - b2) / 2
        c2 = math.cos(2 * al)
        Qm = np.array([[-m * a * bb, -m * a * bb + (mh * l**2 + 2 * m * a * l) * c2], [0.0, -m * a * bb]])
        Qp = np.array([[m * bb * (bb - l * c2), m * l * (l - bb * c2) + m * a**2 + mh * l**2],
                       [m * bb**2, -m * bb * l * c2]])
        return np.concatenate([[b2, b1], np.linalg.solve(Qp, Qm @ np.array([d1, d2]))])

    def flow(x0):
        """First guard crossing with the legs apart (skips the start point and mid-stride scuffing)."""
        sol = solve_ivp(lambda t, x: f_exact(*x), (0, 3), x0, dense_output=True, rtol=1e-11, atol=1e-12)
        ts = np.linspace(0.05, sol.t[-1], 3000)
        ys = sol.sol(ts)
        gs = ys[0] + ys[1] + 2 * gamma
        for i in np.flatnonzero(np.sign(gs[:-1]) != np.sign(gs[1:])):
            if abs(ys[0, i] - ys[1, i]) > 0.1:
                tc = brentq(lambda t: sum(sol.sol(t)[:2]) + 2 * gamma, ts[i], ts[i + 1], xtol=1e-14)
                return sol.sol(tc), tc
        raise RuntimeError("no impact within 3 s")

    def on_guard(z):
        return np.array([-z[0] - 2 * gamma, z[0], z[1], z[2]])

    def residual(z):
        x0 = on_guard(z)
        pre, _ = flow(x0)
        return (reset(pre) - x0)[[1, 2, 3]]

    z = fsolve(residual, [0.2, -0.3, -0.8], xtol=1e-12)
    if np.max(np.abs(residual(z))) > 1e-8:
        raise RuntimeError(f"limit cycle not found (residual {residual(z)})")
    x0 = on_guard(z)
    pre, period = flow(x0)
    J = np.zeros((4, 4))
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        J[:, i] = (reset(pre + e) - reset(pre - e)) / (2 * h)
    r0 = reset(pre)
    xs = sp.Matrix([q1, q2, w1, w2])
    lin = [r0[i] + sum(J[i, j] * (xs[j] - pre[j]) for j in range(4)) for i in range(4)]
    lin[0], lin[1] = q2, q1  # the angle swap is already linear
    box = [[-0.6, 0.6], [-0.6, 0.6], [-3.0, 3.0], [-3.0, 3.0]]
    ball = 0.01 - sum((xs[i] - x0[i]) ** 2 for i in range(4))
    return {
        "name": "compass_gait",
        "description": ("Passive compass gait walker (mh=10, m=5, a=b=1, slope 0.05), fifth-order Taylor "
                        "dynamics about the origin and reset linearized at the limit-cycle impact. "
                        f"Limit-cycle post-impact state {[round(float(v), 9) for v in x0]}, stride time "
                        f"{period:.9g} s. Target: ball of radius 0.1 about that state. "
                        "Guard requires the swing leg ahead (bsw - bst >= 0.1). Documentation-only model."),
        "horizon": 1.0,
        "modes": [{
            "id": 1,
            "states": ["bsw", "bst", "dbsw", "dbst"],
            "box": box,
            "dynamics": [fmt(w1), fmt(w2), fmt(sp.nsimplify(0) + taylor[0]), fmt(taylor[1])],
            "target_ineqs": [fmt(ball)],
        }],
        "edges": [{
            "from": 1, "to": 1,
            "guard_eqs": [f"bsw + bst + {2 * gamma}"],
            # swing leg ahead of the stance leg; excludes mid-stride scuffing
            "guard_ineqs": ["bsw - bst - 0.1"],
            "reset": [fmt(e) for e in lin],
        }],
    }


def main() -> None:
    for name, build in (("rimless_wheel", rimless_wheel), ("compass_gait", compass_gait)):
        doc = build()
        (DATA / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n")
        print("wrote", name)


if __name__ == "__main__":
    main()
