"""Independent reference constructions used by the test suite."""

from __future__ import annotations

import math

import numpy as np

from ubrs.sdp import SdpStandardForm


def analytic_brs_theta(theta: float, target=(0.2, 0.4), T: float = 1.0) -> tuple[float, float]:
    """Initial states of x' = -0.7x + 0.2*theta - 0.1 that lie in the target interval at time T."""
    c = (2.0 * theta - 1.0) / 7.0
    g = math.exp(0.7 * T)
    return ((target[0] - c) * g + c, (target[1] - c) * g + c)


def analytic_uncertain_brs(T: float = 1.0) -> tuple[float, float]:
    lo1, hi1 = analytic_brs_theta(0.2, T=T)
    lo2, hi2 = analytic_brs_theta(1.0, T=T)
    return max(lo1, lo2), min(hi1, hi2)


def linear_solution(x0, theta, t):
    c = (2.0 * theta - 1.0) / 7.0
    return (x0 - c) * np.exp(-0.7 * t) + c


def random_sdp(rng: np.random.Generator, sizes=(4, 3), m: int = 6):
    """SDP with a known optimum built from a complementary primal-dual pair."""
    blocks_X, blocks_Z = [], []
    for n in sizes:
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        r = int(rng.integers(1, n))
        lx = np.concatenate([rng.uniform(0.5, 2.0, r), np.zeros(n - r)])
        lz = np.concatenate([np.zeros(r), rng.uniform(0.5, 2.0, n - r)])
        blocks_X.append(Q @ np.diag(lx) @ Q.T)
        blocks_Z.append(Q @ np.diag(lz) @ Q.T)
    A = []
    for i in range(m):
        mats = []
        for n in sizes:
            B = rng.standard_normal((n, n))
            mats.append(np.eye(n) if i == 0 else 0.5 * (B + B.T))
        A.append(mats)
    y0 = rng.standard_normal(m)
    b = np.array([sum(np.sum(Ai * X) for Ai, X in zip(A[i], blocks_X)) for i in range(m)])
    C = [sum(y0[i] * A[i][k] for i in range(m)) - blocks_Z[k] for k in range(len(sizes))]
    opt = float(b @ y0)
    ent = []
    for k, n in enumerate(sizes):
        for mat, M in [(0, C[k])] + [(i + 1, A[i][k]) for i in range(m)]:
            for a in range(n):
                for c in range(a, n):
                    if M[a, c] != 0:
                        ent.append((mat, k, a, c, M[a, c]))
    e = np.array(ent, dtype=object)
    sf = SdpStandardForm(m, tuple(sizes), b, e[:, 0].astype(int), e[:, 1].astype(int), e[:, 2].astype(int),
                         e[:, 3].astype(int), e[:, 4].astype(float))
    return sf.canonical(), opt
