"""Primal-dual interior-point method for block SDPs (HKM direction, Mehrotra correction).

Free variables written as split pairs (x+, x-) in a diagonal block are
detected and handled natively: the Newton system becomes a saddle-point
system which is solved by a null-space method, and linearly dependent free
columns are removed first with a pivoted QR.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .standard import SdpStandardForm

logger = logging.getLogger(__name__)


class Status(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    SLOW_PROGRESS = "SlowProgress"
    ITER_LIMIT = "IterLimit"


@dataclass
class SolverOptions:
    tolerance: float = 1e-8
    max_iters: int = 200
    step_fraction: float = 0.98
    initial_scale: float | None = None  # default 1 + max |data|
    # Accuracy reported as SlowProgress when the run stalls short of `tolerance`.
    stall_iters: int = 8

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "max_iters": self.max_iters,
                "step_fraction": self.step_fraction, "initial_scale": self.initial_scale,
                "stall_iters": self.stall_iters}


@dataclass
class SdpSolution:
    X: list[np.ndarray]
    y: np.ndarray
    S: list[np.ndarray]
    status: Status
    primal_objective: float
    dual_objective: float
    primal_infeasibility: float
    dual_infeasibility: float
    gap: float
    iterations: int
    history: list[dict] = field(default_factory=list, repr=False)

    @property
    def max_residual(self) -> float:
        return max(self.primal_infeasibility, self.dual_infeasibility, self.gap)


class _Data:
    """Dense PSD blocks, a nonnegative LP part, and native free columns."""

    def __init__(self, sf: SdpStandardForm):
        sf = sf.canonical()
        self.sf = sf
        m = sf.m
        self.m = m
        self.b = sf.b.astype(float)
        self.dense: list[int] = [k for k, s in enumerate(sf.block_sizes) if s > 0]
        self.diag: list[int] = [k for k, s in enumerate(sf.block_sizes) if s < 0]

        # dense blocks
        self.C: list[np.ndarray] = []
        self.P: list[sp.csr_matrix] = []   # rows: constraints, cols: vec(block)
        self.rows: list[np.ndarray] = []   # constraints touching the block
        self.stack: list[sp.csr_matrix] = []
        for k in self.dense:
            n = sf.block_sizes[k]
            sel = sf.blk == k
            mat, i, j, v = sf.mat[sel], sf.i[sel], sf.j[sel], sf.val[sel]
            c = mat == 0
            C = np.zeros((n, n))
            C[i[c], j[c]] = v[c]
            C[j[c], i[c]] = v[c]
            self.C.append(C)
            a = ~c
            ar, ai, aj, av = mat[a] - 1, i[a], j[a], v[a]
            off = ai != aj
            r = np.concatenate([ar, ar[off]])
            ci = np.concatenate([ai, aj[off]])
            cj = np.concatenate([aj, ai[off]])
            vv = np.concatenate([av, av[off]])
            P = sp.csr_matrix((vv, (r, ci * n + cj)), shape=(m, n * n))
            self.P.append(P)
            touched = np.unique(r)
            self.rows.append(touched)
            pos = np.full(m, -1)
            pos[touched] = np.arange(len(touched))
            S = sp.csr_matrix((vv, (pos[r] * n + ci, cj)), shape=(len(touched) * n, n))
            self.stack.append(S)

        # diagonal blocks flattened into one LP vector
        lp_c, lp_cols = [], []
        self.lp_origin: list[tuple[int, int]] = []
        off = 0
        A_rows, A_cols, A_vals = [], [], []
        for k in self.diag:
            n = -sf.block_sizes[k]
            sel = sf.blk == k
            mat, i, v = sf.mat[sel], sf.i[sel], sf.val[sel]
            c = np.zeros(n)
            c[i[mat == 0]] = v[mat == 0]
            lp_c.append(c)
            a = mat > 0
            A_rows.append(mat[a] - 1)
            A_cols.append(i[a] + off)
            A_vals.append(v[a])
            self.lp_origin.extend((k, t) for t in range(n))
            off += n
        n_lp = off
        c_lp = np.concatenate(lp_c) if lp_c else np.zeros(0)
        A_lp = sp.csc_matrix(
            (np.concatenate(A_vals) if A_vals else np.zeros(0),
             (np.concatenate(A_rows) if A_rows else np.zeros(0, int),
              np.concatenate(A_cols) if A_cols else np.zeros(0, int))),
            shape=(m, n_lp))
        A_lp.sort_indices()

        # detect split free pairs: columns p, q with A_q = -A_p and c_q = -c_p
        keyed: dict[tuple, list[int]] = {}
        for col in range(n_lp):
            s, e = A_lp.indptr[col], A_lp.indptr[col + 1]
            key = (tuple(A_lp.indices[s:e]), tuple(A_lp.data[s:e]), c_lp[col])
            keyed.setdefault(key, []).append(col)
        paired = np.zeros(n_lp, dtype=bool)
        pairs: list[tuple[int, int]] = []
        for col in range(n_lp):
            if paired[col]:
                continue
            s, e = A_lp.indptr[col], A_lp.indptr[col + 1]
            neg = (tuple(A_lp.indices[s:e]), tuple(-A_lp.data[s:e]), -c_lp[col] + 0.0)
            for other in keyed.get(neg, []):
                if other != col and not paired[other]:
                    paired[col] = paired[other] = True
                    pairs.append((col, other))
                    break
        self.pairs = pairs
        pos_cols = np.array([p for p, _ in pairs], dtype=np.int64)
        self.lp_keep = np.flatnonzero(~paired)
        self.A_l = A_lp[:, self.lp_keep].tocsr()
        self.c_l = c_lp[self.lp_keep]
        self.A_f = A_lp[:, pos_cols].toarray() if len(pairs) else np.zeros((m, 0))
        self.c_f = c_lp[pos_cols] if len(pairs) else np.zeros(0)
        self.n_lp_total = n_lp

    def A(self, Xs: list[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.m)
        for P, X in zip(self.P, Xs):
            out += P @ X.ravel()
        return out

    def At(self, y: np.ndarray) -> list[np.ndarray]:
        out = []
        for P, C in zip(self.P, self.C):
            n = C.shape[0]
            M = (P.T @ y).reshape(n, n)
            out.append(M)
        return out

    def data_norm(self) -> float:
        vals = [np.abs(self.b).max(initial=0.0)]
        vals += [np.abs(C).max(initial=0.0) for C in self.C]
        vals += [np.abs(self.c_l).max(initial=0.0), np.abs(self.c_f).max(initial=0.0)]
        vals += [abs(P).max() if P.nnz else 0.0 for P in self.P]
        if self.A_l.nnz:
            vals.append(abs(self.A_l).max())
        if self.A_f.size:
            vals.append(np.abs(self.A_f).max())
        return float(max(vals))


def _max_step(X: np.ndarray, dX: np.ndarray) -> float:
    """Largest alpha with X + alpha dX PSD (X positive definite)."""
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        return 0.0
    Li = sla.solve_triangular(L, np.eye(len(X)), lower=True)
    W = Li @ dX @ Li.T
    lam = np.linalg.eigvalsh(0.5 * (W + W.T))[0]
    return np.inf if lam >= 0 else -1.0 / lam


def _max_step_lp(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def _inv_spd(Z: np.ndarray) -> np.ndarray:
    c = sla.cho_factor(Z, lower=True)
    Zi = sla.cho_solve(c, np.eye(len(Z)))
    return 0.5 * (Zi + Zi.T)


def solve(sf: SdpStandardForm, opts: SolverOptions | None = None) -> SdpSolution:
    """Solve max <C,X> s.t. A(X) = b, X PSD together with its dual; never raises on numerical trouble."""
    opts = opts or SolverOptions()
    d = _Data(sf)
    m = d.m
    tol = opts.tolerance
    nd = len(d.C)

    # remove dependent free columns
    nf_all = d.A_f.shape[1]
    keep_f = np.arange(nf_all)
    if nf_all:
        Qf, Rf, piv = sla.qr(d.A_f, pivoting=True, mode="full")
        diag = np.abs(np.diag(Rf)) if Rf.size else np.zeros(0)
        lead = diag[0] if len(diag) else 0.0
        rank = int(np.sum(diag > 1e-10 * max(lead, 1.0) * max(m, 1))) if lead > 0 else 0
        keep_f = np.sort(piv[:rank])
        drop = np.sort(piv[rank:])
        if len(drop):
            Ak = d.A_f[:, keep_f]
            B, *_ = np.linalg.lstsq(Ak, d.A_f[:, drop], rcond=None) if len(keep_f) else (np.zeros((0, len(drop))),)
            implied = B.T @ d.c_f[keep_f] if len(keep_f) else np.zeros(len(drop))
            if np.max(np.abs(implied - d.c_f[drop])) > 1e-9 * (1.0 + np.abs(d.c_f).max()):
                logger.info("free columns are dependent with inconsistent objective: unbounded")
                return _finish_trivial(d, Status.UNBOUNDED, keep_f)
            logger.debug("dropped %d dependent free columns", len(drop))
    Af = d.A_f[:, keep_f]
    cf = d.c_f[keep_f]
    nf = Af.shape[1]

    if m == 0:
        return _finish_trivial(d, Status.OPTIMAL, keep_f)

    if nf:
        Qfull, Rfull = sla.qr(Af, mode="full")
        Q1, Q2 = Qfull[:, :nf], Qfull[:, nf:]
        R = Rfull[:nf, :]
    else:
        Q1, Q2, R = np.zeros((m, 0)), np.eye(m), np.zeros((0, 0))

    xi = opts.initial_scale if opts.initial_scale is not None else 1.0 + d.data_norm()
    X = [xi * np.eye(C.shape[0]) for C in d.C]
    Z = [xi * np.eye(C.shape[0]) for C in d.C]
    nl = len(d.c_l)
    x = np.full(nl, xi)
    s = np.full(nl, xi)
    z = np.zeros(nf)
    y = np.zeros(m)
    N = sum(C.shape[0] for C in d.C) + nl

    b_norm = 1.0 + np.abs(d.b).max(initial=0.0)
    c_norm = 1.0 + max([np.abs(C).max(initial=0.0) for C in d.C] + [np.abs(d.c_l).max(initial=0.0),
                                                                      np.abs(cf).max(initial=0.0)])
    history: list[dict] = []
    best = None
    status = Status.ITER_LIMIT
    stall = 0
    it = 0

    def measures():
        AX = d.A(X) + (d.A_l @ x if nl else 0.0) + (Af @ z if nf else 0.0)
        rp = d.b - AX
        Aty = d.At(y)
        Rd = [C + Zk - Ak for C, Zk, Ak in zip(d.C, Z, Aty)]
        rdl = d.c_l + s - (d.A_l.T @ y if nl else 0.0)
        rf = cf - Af.T @ y
        pobj = sum(float(np.sum(C * Xk)) for C, Xk in zip(d.C, X)) + float(d.c_l @ x) + float(cf @ z)
        dobj = float(d.b @ y)
        pinf = np.abs(rp).max(initial=0.0) / b_norm
        dinf = max([np.abs(R_).max(initial=0.0) for R_ in Rd] + [np.abs(rdl).max(initial=0.0),
                                                                 np.abs(rf).max(initial=0.0)]) / c_norm
        gap = abs(pobj - dobj) / (1.0 + abs(dobj))
        return rp, Rd, rdl, rf, pobj, dobj, pinf, dinf, gap

    for it in range(opts.max_iters + 1):
        rp, Rd, rdl, rf, pobj, dobj, pinf, dinf, gap = measures()
        mu = (sum(float(np.sum(Xk * Zk)) for Xk, Zk in zip(X, Z)) + float(x @ s)) / max(N, 1)
        history.append({"iter": it, "pobj": pobj, "dobj": dobj, "pinf": pinf, "dinf": dinf,
                        "gap": gap, "mu": mu})
        logger.debug("it %3d pobj %.10e dobj %.10e pinf %.2e dinf %.2e gap %.2e", it, pobj, dobj,
                     pinf, dinf, gap)
        score = max(pinf, dinf, gap)
        if best is None or score < best[0]:
            best = (score, [Xk.copy() for Xk in X], x.copy(), z.copy(), y.copy(), [Zk.copy() for Zk in Z],
                    s.copy(), it)
            stall = 0
        else:
            stall += 1
        if score <= tol:
            status = Status.OPTIMAL
            break

        # infeasibility certificates
        tau = -dobj
        if tau > 0:
            ray = max([np.abs(C - R_).max(initial=0.0) for C, R_ in zip(d.C, Rd)]
                      + [np.abs(d.c_l - rdl).max(initial=0.0), np.abs(cf - rf).max(initial=0.0)])
            if ray / tau <= tol and pinf > tol:
                status = Status.INFEASIBLE
                break
        if pobj > 0:
            ax = np.abs(d.b - rp).max(initial=0.0)
            if ax / pobj <= tol and dinf > tol:
                status = Status.UNBOUNDED
                break
        if it == opts.max_iters:
            status = Status.ITER_LIMIT
            break
        if stall >= opts.stall_iters:
            status = Status.SLOW_PROGRESS
            break

        try:
            Zinv = [_inv_spd(Zk) for Zk in Z]
            M = np.zeros((m, m))
            for b_i in range(nd):
                n = d.C[b_i].shape[0]
                rows = d.rows[b_i]
                if not len(rows):
                    continue
                T = (d.stack[b_i] @ Zinv[b_i]).reshape(len(rows), n, n)
                W = np.matmul(X[b_i], T).reshape(len(rows), n * n)
                Mb = d.P[b_i][rows] @ W.T
                M[np.ix_(rows, rows)] += Mb
            if nl:
                D = x / s
                M += (d.A_l @ sp.diags(D) @ d.A_l.T).toarray()
            M = 0.5 * (M + M.T)
            K = Q2.T @ M @ Q2
            try:
                Kc = sla.cho_factor(K, lower=True)
            except np.linalg.LinAlgError:
                reg = 1e-14 * max(np.trace(K), 1.0)
                Kc = sla.cho_factor(K + reg * np.eye(len(K)), lower=True)
            MQ1 = M @ Q1
        except (np.linalg.LinAlgError, ValueError) as exc:
            logger.info("numerical breakdown at iteration %d: %s", it, exc)
            status = Status.SLOW_PROGRESS
            break

        u = sla.solve_triangular(R, rf, trans="T") if nf else np.zeros(0)
        base = Q2.T @ (MQ1 @ u) if nf else np.zeros(Q2.shape[1])

        def direction(G, gl):
            h = d.A(G) + (d.A_l @ gl if nl else 0.0) - rp
            w = sla.cho_solve(Kc, Q2.T @ h - base)
            # two refinement sweeps recover digits lost to an ill-conditioned K
            for _ in range(2):
                res = Q2.T @ (h - M @ (Q1 @ u + Q2 @ w))
                if not np.all(np.isfinite(res)):
                    break
                w = w + sla.cho_solve(Kc, res)
            dy = Q1 @ u + Q2 @ w
            dz = sla.solve_triangular(R, Q1.T @ (M @ dy - h)) if nf else np.zeros(0)
            Ady = d.At(dy)
            dZ = [Ak - R_ for Ak, R_ in zip(Ady, Rd)]
            dX = []
            for Gk, Xk, Ak, Zi in zip(G, X, Ady, Zinv):
                t = Gk - Xk @ Ak @ Zi
                dX.append(0.5 * (t + t.T))
            if nl:
                Atdy = d.A_l.T @ dy
                ds = Atdy - rdl
                dx = gl - (x / s) * Atdy
            else:
                ds = dx = np.zeros(0)
            return dX, dx, dz, dy, dZ, ds

        def steps(dX, dx, dZ, ds):
            ap = min([_max_step(Xk, dXk) for Xk, dXk in zip(X, dX)] + [_max_step_lp(x, dx), np.inf])
            ad = min([_max_step(Zk, dZk) for Zk, dZk in zip(Z, dZ)] + [_max_step_lp(s, ds), np.inf])
            return ap, ad

        # predictor
        XRZ = [Xk @ R_ @ Zi for Xk, R_, Zi in zip(X, Rd, Zinv)]
        G = [-Xk + t for Xk, t in zip(X, XRZ)]
        gl = -x + (x / s) * rdl if nl else np.zeros(0)
        dXa, dxa, _, _, dZa, dsa = direction(G, gl)
        ap, ad = steps(dXa, dxa, dZa, dsa)
        ap, ad = min(1.0, ap), min(1.0, ad)
        mu_a = (sum(float(np.sum((Xk + ap * a) * (Zk + ad * bb))) for Xk, a, Zk, bb in zip(X, dXa, Z, dZa))
                + float((x + ap * dxa) @ (s + ad * dsa))) / max(N, 1)
        sigma = min(1.0, max(0.0, (mu_a / mu) ** 3)) if mu > 0 else 0.0

        # corrector
        G = [sigma * mu * Zi - Xk + t - dXk @ dZk @ Zi
             for Zi, Xk, t, dXk, dZk in zip(Zinv, X, XRZ, dXa, dZa)]
        gl = (sigma * mu / s - x + (x / s) * rdl - dxa * dsa / s) if nl else np.zeros(0)
        dX, dx, dz, dy, dZ, ds = direction(G, gl)
        ap, ad = steps(dX, dx, dZ, ds)
        ap = min(1.0, opts.step_fraction * ap)
        ad = min(1.0, opts.step_fraction * ad)
        if ap < 1e-12 and ad < 1e-12:
            logger.info("step length collapsed at iteration %d", it)
            status = Status.SLOW_PROGRESS
            break
        X = [Xk + ap * a for Xk, a in zip(X, dX)]
        x = x + ap * dx
        z = z + ap * dz
        y = y + ad * dy
        Z = [Zk + ad * a for Zk, a in zip(Z, dZ)]
        s = s + ad * ds

    if status in (Status.SLOW_PROGRESS, Status.ITER_LIMIT) and best is not None:
        _, X, x, z, y, Z, s, _ = best
        rp, Rd, rdl, rf, pobj, dobj, pinf, dinf, gap = measures()
        if max(pinf, dinf, gap) <= tol:
            status = Status.OPTIMAL

    sol = _pack(d, X, x, z, keep_f, y, Z, s, status, pobj, dobj, pinf, dinf, gap, it)
    sol.history = history
    logger.info("SDP %s after %d iterations: pobj %.10g dobj %.10g (pinf %.1e dinf %.1e gap %.1e)",
                status.value, it, pobj, dobj, pinf, dinf, gap)
    return sol


def _pack(d: _Data, X, x, z, keep_f, y, Z, s, status, pobj, dobj, pinf, dinf, gap, it) -> SdpSolution:
    sf = d.sf
    Xout: list[np.ndarray] = [None] * sf.nblocks  # type: ignore[list-item]
    Sout: list[np.ndarray] = [None] * sf.nblocks  # type: ignore[list-item]
    for pos, k in enumerate(d.dense):
        Xout[k] = X[pos]
        Sout[k] = Z[pos]
    lp_x = np.zeros(d.n_lp_total)
    lp_s = np.zeros(d.n_lp_total)
    lp_x[d.lp_keep] = x
    lp_s[d.lp_keep] = s
    zfull = np.zeros(len(d.pairs))
    zfull[keep_f] = z
    A_all = d.A_f
    slack = A_all.T @ y - d.c_f if len(d.pairs) else np.zeros(0)
    for (p, q), zv, sv in zip(d.pairs, zfull, slack):
        lp_x[p], lp_x[q] = max(zv, 0.0), max(-zv, 0.0)
        lp_s[p], lp_s[q] = sv, -sv
    off = 0
    for k in d.diag:
        n = -sf.block_sizes[k]
        Xout[k] = lp_x[off:off + n].copy()
        Sout[k] = lp_s[off:off + n].copy()
        off += n
    return SdpSolution(Xout, y.copy(), Sout, status, pobj, dobj, pinf, dinf, gap, it)


def _finish_trivial(d: _Data, status: Status, keep_f) -> SdpSolution:
    X = [np.zeros_like(C) for C in d.C]
    x = np.zeros(len(d.c_l))
    z = np.zeros(len(keep_f))
    y = np.zeros(d.m)
    pobj = np.inf if status == Status.UNBOUNDED else 0.0
    return _pack(d, X, x, z, keep_f, y, [np.zeros_like(C) for C in d.C], np.zeros(len(d.c_l)),
                 status, pobj, 0.0, 0.0, 0.0, 0.0, 0)
