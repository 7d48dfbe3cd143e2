"""Block-diagonal SDP in SDPA standard form.

Primal: max <C, X>  s.t. <A_i, X> = b_i, X PSD.
Dual:   min b'y     s.t. sum_i y_i A_i - C PSD.

Matrices are stored as one coordinate list of upper-triangle entries
``(mat, block, i, j, value)`` with ``mat = 0`` for C and ``mat = i`` for A_i.
Indices here are 0-based; the SDPA text codec converts to 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..sos import SdpProblem, SosSolution


class StandardFormError(ValueError):
    pass


@dataclass
class SdpStandardForm:
    m: int
    block_sizes: tuple[int, ...]  # negative size means a diagonal block
    b: np.ndarray
    mat: np.ndarray
    blk: np.ndarray
    i: np.ndarray
    j: np.ndarray
    val: np.ndarray
    # Bookkeeping for split free variables: pair k lives at diagonal
    # positions (2k, 2k+1) of block ``split_block``.
    split_block: int | None = None
    n_split: int = 0

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.mat = np.asarray(self.mat, dtype=np.int64)
        self.blk = np.asarray(self.blk, dtype=np.int64)
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=float)

    @property
    def nblocks(self) -> int:
        return len(self.block_sizes)

    def canonical(self) -> SdpStandardForm:
        """Sorted, duplicate-merged, zero-free entry list with i <= j."""
        lo = np.minimum(self.i, self.j)
        hi = np.maximum(self.i, self.j)
        keys = np.stack([self.mat, self.blk, lo, hi], axis=1)
        if len(keys):
            uniq, inv = np.unique(keys, axis=0, return_inverse=True)
            vals = np.zeros(len(uniq))
            np.add.at(vals, inv.ravel(), self.val)
            keep = vals != 0.0
            uniq, vals = uniq[keep], vals[keep]
        else:
            uniq, vals = np.zeros((0, 4), dtype=np.int64), np.zeros(0)
        return SdpStandardForm(self.m, tuple(self.block_sizes), self.b.copy(), uniq[:, 0], uniq[:, 1],
                               uniq[:, 2], uniq[:, 3], vals, self.split_block, self.n_split)

    def validate(self) -> None:
        if len(self.b) != self.m:
            raise StandardFormError(f"b has length {len(self.b)}, expected m={self.m}")
        if any(s == 0 for s in self.block_sizes):
            raise StandardFormError("block sizes must be nonzero")
        sizes = np.abs(np.array(self.block_sizes, dtype=np.int64))
        if len(self.val):
            if self.mat.min() < 0 or self.mat.max() > self.m:
                raise StandardFormError("matrix number out of range")
            if self.blk.min() < 0 or self.blk.max() >= len(sizes):
                raise StandardFormError("block number out of range")
            n = sizes[self.blk]
            if np.any(self.i < 0) or np.any(self.j < 0) or np.any(self.i >= n) or np.any(self.j >= n):
                raise StandardFormError("entry index out of block range")
            diag = np.array(self.block_sizes, dtype=np.int64)[self.blk] < 0
            if np.any(diag & (self.i != self.j)):
                raise StandardFormError("off-diagonal entry in a diagonal block")

    def equals(self, other: SdpStandardForm) -> bool:
        a, b = self.canonical(), other.canonical()
        return (a.m == b.m and tuple(a.block_sizes) == tuple(b.block_sizes)
                and np.array_equal(a.b, b.b) and np.array_equal(a.mat, b.mat)
                and np.array_equal(a.blk, b.blk) and np.array_equal(a.i, b.i)
                and np.array_equal(a.j, b.j) and np.array_equal(a.val, b.val)
                and a.split_block == b.split_block and a.n_split == b.n_split)

    def dense_block(self, mat: int, block: int) -> np.ndarray:
        """Materialize one matrix block (diagonal blocks as full diagonal matrices)."""
        n = abs(self.block_sizes[block])
        out = np.zeros((n, n))
        sel = (self.mat == mat) & (self.blk == block)
        for a, bb, v in zip(self.i[sel], self.j[sel], self.val[sel]):
            out[a, bb] = v
            out[bb, a] = v
        return out


def to_standard_form(p: SdpProblem) -> SdpStandardForm:
    """Gram blocks keep their order; free variables become a trailing diagonal block of split pairs.

    The SOS objective (minimize c'y) turns into maximizing <C, X> with C = -c
    on the positive parts and +c on the negative parts. A Gram trace penalty
    appears as -penalty on the Gram diagonals.
    """
    if p.m == 0 and p.n_free == 0 and not p.block_sizes:
        raise StandardFormError("empty problem")
    mats, blks, ii, jj, vals = [], [], [], [], []
    mats.append(p.gram_rows + 1)
    blks.append(p.gram_blocks)
    ii.append(p.gram_i)
    jj.append(p.gram_j)
    vals.append(p.gram_vals)
    if p.gram_penalty:
        for k, n in enumerate(p.block_sizes):
            mats.append(np.zeros(n, dtype=np.int64))
            blks.append(np.full(n, k))
            ii.append(np.arange(n))
            jj.append(np.arange(n))
            vals.append(np.full(n, -p.gram_penalty))
    sizes = list(p.block_sizes)
    split_block = None
    if p.n_free:
        split_block = len(sizes)
        sizes.append(-2 * p.n_free)
        k = np.arange(p.n_free)
        nz = p.c != 0
        for sign, off in ((-1.0, 0), (1.0, 1)):
            mats.append(np.zeros(int(nz.sum()), dtype=np.int64))
            blks.append(np.full(int(nz.sum()), split_block))
            ii.append(2 * k[nz] + off)
            jj.append(2 * k[nz] + off)
            vals.append(sign * p.c[nz])
        for sign, off in ((1.0, 0), (-1.0, 1)):
            mats.append(p.free_rows + 1)
            blks.append(np.full(len(p.free_rows), split_block))
            ii.append(2 * p.free_cols + off)
            jj.append(2 * p.free_cols + off)
            vals.append(sign * p.free_vals)
    sf = SdpStandardForm(
        p.m, tuple(int(s) for s in sizes), p.b.copy(),
        np.concatenate(mats), np.concatenate(blks), np.concatenate(ii), np.concatenate(jj),
        np.concatenate(vals), split_block, p.n_free,
    ).canonical()
    sf.validate()
    return sf


def sos_solution(sf: SdpStandardForm, sol, c: np.ndarray | None = None) -> SosSolution:
    """Map an SDP solution back to free values and Gram matrices.

    With ``c`` the reported objective is c'y alone, excluding any Gram penalty.
    """
    grams = []
    free = np.zeros(sf.n_split)
    for k, X in enumerate(sol.X):
        if k == sf.split_block:
            x = np.asarray(X)
            free = x[0:2 * sf.n_split:2] - x[1:2 * sf.n_split:2]
        else:
            grams.append(np.asarray(X) if sf.block_sizes[k] > 0 else np.diag(X))
    obj = float(c @ free) if c is not None else -sol.primal_objective
    return SosSolution(free=free, grams=grams, status=sol.status, objective=obj, raw=sol)
