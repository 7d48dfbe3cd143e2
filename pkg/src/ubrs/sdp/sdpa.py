"""SDPA sparse (.dat-s) text codec."""

from __future__ import annotations

import re

import numpy as np

from .standard import SdpStandardForm, StandardFormError

_SPLIT_TAG = "* split-free-block"
_PUNCT = re.compile(r"[{}(),]")


class SdpaFormatError(ValueError):
    pass


def _num(v: float) -> str:
    return f"{v:.17g}"


def export_sdpa(sf: SdpStandardForm) -> str:
    """Entries are written in canonical order, so the output is byte-stable."""
    if sf.m < 1:
        raise StandardFormError("SDPA requires at least one constraint (empty b vector)")
    sf = sf.canonical()
    lines = []
    if sf.split_block is not None:
        lines.append(f"{_SPLIT_TAG} {sf.split_block + 1} {sf.n_split}")
    lines.append(str(sf.m))
    lines.append(str(sf.nblocks))
    lines.append(" ".join(str(s) for s in sf.block_sizes))
    lines.append(" ".join(_num(v) for v in sf.b))
    for mat, blk, i, j, v in zip(sf.mat, sf.blk, sf.i, sf.j, sf.val):
        lines.append(f"{mat} {blk + 1} {i + 1} {j + 1} {_num(v)}")
    return "\n".join(lines) + "\n"


def import_sdpa(text: str) -> SdpStandardForm:
    """Tolerant reader: comments, blank lines, braces/commas and free whitespace are accepted."""
    split_block, n_split = None, 0
    rows: list[tuple[int, list[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if s.startswith(_SPLIT_TAG):
            parts = s[len(_SPLIT_TAG):].split()
            try:
                split_block, n_split = int(parts[0]) - 1, int(parts[1])
            except (IndexError, ValueError):
                raise SdpaFormatError(f"line {lineno}: malformed split-free-block tag") from None
            continue
        if not s or s[0] in "\"*":
            continue
        toks = _PUNCT.sub(" ", s).split()
        if toks:
            rows.append((lineno, toks))
    if len(rows) < 4:
        raise SdpaFormatError("file ends before the four header lines")

    def ints(idx: int, count: int | None = None) -> list[int]:
        lineno, toks = rows[idx]
        try:
            vals = [int(float(t)) for t in toks]
        except ValueError:
            raise SdpaFormatError(f"line {lineno}: expected integers, got {' '.join(toks)!r}") from None
        return vals if count is None else vals[:count]

    m = ints(0, 1)[0]
    nblocks = ints(1, 1)[0]
    sizes = ints(2)
    if len(sizes) < nblocks:
        raise SdpaFormatError(f"line {rows[2][0]}: {len(sizes)} block sizes for {nblocks} blocks")
    sizes = sizes[:nblocks]
    # b may wrap across several lines
    b: list[float] = []
    k = 3
    while len(b) < m:
        if k >= len(rows):
            raise SdpaFormatError("file ends inside the b vector")
        lineno, toks = rows[k]
        try:
            b.extend(float(t) for t in toks)
        except ValueError:
            raise SdpaFormatError(f"line {lineno}: malformed b entry") from None
        k += 1
    if len(b) != m:
        raise SdpaFormatError(f"line {rows[k - 1][0]}: b has {len(b)} entries, expected {m}")

    ent = []
    for lineno, toks in rows[k:]:
        if len(toks) != 5:
            raise SdpaFormatError(f"line {lineno}: expected 'matno block i j value', got {' '.join(toks)!r}")
        try:
            mat, blk, i, j = (int(t) for t in toks[:4])
            v = float(toks[4])
        except ValueError:
            raise SdpaFormatError(f"line {lineno}: malformed entry {' '.join(toks)!r}") from None
        if not 0 <= mat <= m:
            raise SdpaFormatError(f"line {lineno}: matrix number {mat} out of range 0..{m}")
        if not 1 <= blk <= nblocks:
            raise SdpaFormatError(f"line {lineno}: block {blk} out of range 1..{nblocks}")
        n = abs(sizes[blk - 1])
        if not (1 <= i <= n and 1 <= j <= n):
            raise SdpaFormatError(f"line {lineno}: index ({i},{j}) outside block {blk} of size {n}")
        if sizes[blk - 1] < 0 and i != j:
            raise SdpaFormatError(f"line {lineno}: off-diagonal entry in diagonal block {blk}")
        ent.append((mat, blk - 1, min(i, j) - 1, max(i, j) - 1, v))
    arr = np.array(ent, dtype=object).reshape(-1, 5)
    sf = SdpStandardForm(
        m, tuple(sizes), np.array(b),
        arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2].astype(np.int64),
        arr[:, 3].astype(np.int64), arr[:, 4].astype(float), split_block, n_split,
    )
    return sf.canonical()
