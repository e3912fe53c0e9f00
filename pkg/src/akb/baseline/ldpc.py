"""Binary LDPC codes: alist I/O, PEG construction, systematic encoding, sum-product decoding.

LLR sign convention: positive means bit 0 is more likely.
"""

from __future__ import annotations

import argparse
import functools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

FIXTURE = "ldpc_1536_1024_peg.alist"
_MAX_LLR = 50.0
_TINY = 1e-12


@dataclass
class DecodeResult:
    message: np.ndarray
    success: np.ndarray
    iterations: np.ndarray


@dataclass
class LdpcCode:
    """Parity-check matrix given by ``rows[c]`` (variable indices of check ``c``).

    The columns are ordered so that the first ``k`` positions carry the
    message and the last ``m`` the parity; ``parity_map`` gives
    ``parity = parity_map @ message (mod 2)``.
    """

    n: int
    rows: list[np.ndarray]
    parity_map: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.m = len(self.rows)
        self.rows = [np.asarray(r, dtype=np.int64) for r in self.rows]
        H = self.dense()
        # H = [A | B] with B the parity columns; parity = B^-1 A m
        A, B = H[:, : self.n - self.m], H[:, self.n - self.m :]
        Binv = _gf2_inverse(B)
        if Binv is None:
            raise ValueError("parity part of H is singular; reorder columns (see systematic_column_order)")
        self.parity_map = (Binv.astype(np.int64) @ A.astype(np.int64)) % 2
        self.parity_map = self.parity_map.astype(np.uint8)
        self._build_edges()

    @property
    def k(self) -> int:
        return self.n - self.m

    @property
    def rate(self) -> float:
        return self.k / self.n

    def dense(self) -> np.ndarray:
        H = np.zeros((self.m, self.n), dtype=np.uint8)
        for c, r in enumerate(self.rows):
            H[c, r] = 1
        return H

    def _build_edges(self):
        chk = np.concatenate([np.full(len(r), c) for c, r in enumerate(self.rows)])
        var = np.concatenate(self.rows)
        self.edge_chk = chk
        self.edge_var = var
        self.n_edges = var.size
        self.chk_start = np.concatenate([[0], np.cumsum([len(r) for r in self.rows])[:-1]])
        self.chk_deg = np.array([len(r) for r in self.rows])
        # (E, n) incidence used to gather per-variable sums with a sparse product
        self.var_incidence = sp.csr_matrix(
            (np.ones(self.n_edges), (np.arange(self.n_edges), var)), shape=(self.n_edges, self.n)
        )

    def syndrome(self, c: np.ndarray) -> np.ndarray:
        c = np.atleast_2d(c)
        return np.add.reduceat(c[:, self.edge_var].astype(np.int64), self.chk_start, axis=1) % 2

    # -- alist ---------------------------------------------------------------

    @classmethod
    def from_alist(cls, path) -> "LdpcCode":
        with open(path) as fh:
            return cls.from_alist_text(fh.read())

    @classmethod
    def from_alist_text(cls, text: str) -> "LdpcCode":
        tok = iter(int(t) for t in text.split())
        n, m = next(tok), next(tok)
        max_col, max_row = next(tok), next(tok)
        col_deg = [next(tok) for _ in range(n)]
        row_deg = [next(tok) for _ in range(m)]
        cols = []
        for j in range(n):
            entries = [next(tok) for _ in range(max_col)]
            cols.append(sorted(e - 1 for e in entries[: col_deg[j]]))
        rows = []
        for c in range(m):
            entries = [next(tok) for _ in range(max_row)]
            rows.append(sorted(e - 1 for e in entries[: row_deg[c]]))
        from_cols = [[] for _ in range(m)]
        for j, cs in enumerate(cols):
            for c in cs:
                from_cols[c].append(j)
        if [sorted(r) for r in from_cols] != rows:
            raise ValueError("alist column and row lists disagree")
        return cls(n, rows)

    def to_alist_text(self) -> str:
        cols = [[] for _ in range(self.n)]
        for c, r in enumerate(self.rows):
            for j in r:
                cols[j].append(c)
        max_col = max(len(c) for c in cols)
        max_row = max(len(r) for r in self.rows)
        lines = [f"{self.n} {self.m}", f"{max_col} {max_row}"]
        lines.append(" ".join(str(len(c)) for c in cols))
        lines.append(" ".join(str(len(r)) for r in self.rows))
        for c in cols:
            lines.append(" ".join(str(x + 1) for x in sorted(c)) + " 0" * (max_col - len(c)))
        for r in self.rows:
            lines.append(" ".join(str(x + 1) for x in sorted(r)) + " 0" * (max_row - len(r)))
        return "\n".join(lines) + "\n"


def _gf2_inverse(B: np.ndarray) -> np.ndarray | None:
    m = B.shape[0]
    aug = np.concatenate([B.astype(np.uint8) & 1, np.eye(m, dtype=np.uint8)], axis=1)
    for col in range(m):
        piv = np.nonzero(aug[col:, col])[0]
        if piv.size == 0:
            return None
        p = col + piv[0]
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        hits = np.nonzero(aug[:, col])[0]
        hits = hits[hits != col]
        aug[hits] ^= aug[col]
    return aug[:, m:]


def gf2_rank_pivots(H: np.ndarray) -> list[int]:
    """Pivot columns of the GF(2) row echelon form of ``H``."""
    A = H.copy().astype(np.uint8)
    m, n = A.shape
    pivots = []
    row = 0
    for col in range(n):
        if row == m:
            break
        nz = np.nonzero(A[row:, col])[0]
        if nz.size == 0:
            continue
        p = row + nz[0]
        if p != row:
            A[[row, p]] = A[[p, row]]
        hits = np.nonzero(A[:, col])[0]
        hits = hits[hits != row]
        A[hits] ^= A[row]
        pivots.append(col)
        row += 1
    return pivots


def systematic_column_order(rows: list, n: int) -> list[int] | None:
    """Column permutation putting an invertible set of parity columns last, or None if H is rank deficient."""
    m = len(rows)
    H = np.zeros((m, n), dtype=np.uint8)
    for c, r in enumerate(rows):
        H[c, r] = 1
    # scan columns from the right so the parity set prefers high indices
    rev = gf2_rank_pivots(H[:, ::-1])
    if len(rev) < m:
        return None
    parity = sorted(n - 1 - p for p in rev)
    pset = set(parity)
    return [j for j in range(n) if j not in pset] + parity


def peg_construct(n: int, m: int, var_degree: int = 3, seed: int = 0) -> list[np.ndarray]:
    """Progressive edge growth: every new edge goes to a check that is far (or unreachable)
    from the variable in the current graph, breaking ties by lowest check degree."""
    rng = np.random.default_rng(seed)
    var_adj: list[list[int]] = [[] for _ in range(n)]
    chk_adj: list[list[int]] = [[] for _ in range(m)]
    chk_deg = np.zeros(m, dtype=np.int64)

    def pick(cands: np.ndarray) -> int:
        d = chk_deg[cands]
        best = cands[d == d.min()]
        return int(best[rng.integers(best.size)])

    for j in range(n):
        for k in range(var_degree):
            if k == 0:
                c = pick(np.arange(m))
            else:
                reached = np.zeros(m, dtype=bool)
                reached[var_adj[j]] = True
                visited = {j}
                frontier = list(var_adj[j])
                while True:
                    new_vars = []
                    for cc in frontier:
                        for v in chk_adj[cc]:
                            if v not in visited:
                                visited.add(v)
                                new_vars.append(v)
                    new_checks = sorted({c2 for v in new_vars for c2 in var_adj[v] if not reached[c2]})
                    if not new_checks:
                        cands = np.nonzero(~reached)[0]
                        break
                    before = reached.copy()
                    reached[new_checks] = True
                    if reached.all():
                        cands = np.nonzero(~before)[0]
                        break
                    frontier = new_checks
                c = pick(cands)
            var_adj[j].append(c)
            chk_adj[c].append(j)
            chk_deg[c] += 1
    return [np.array(sorted(r), dtype=np.int64) for r in chk_adj]


def build_code(n: int = 1536, k: int = 1024, var_degree: int = 3, seed: int = 0, max_tries: int = 20) -> LdpcCode:
    m = n - k
    for attempt in range(max_tries):
        rows = peg_construct(n, m, var_degree, seed + attempt)
        order = systematic_column_order(rows, n)
        if order is None:
            continue
        newpos = np.empty(n, dtype=np.int64)
        newpos[order] = np.arange(n)
        return LdpcCode(n, [np.sort(newpos[r]) for r in rows])
    raise RuntimeError("could not build a full-rank code")


@functools.lru_cache(maxsize=4)
def _load_fixture(path: str) -> LdpcCode:
    return LdpcCode.from_alist(path)


def default_code(path=None) -> LdpcCode:
    """The shipped rate-2/3, n=1536 code (or an alist file at ``path``)."""
    if path is None:
        path = str(resources.files("akb") / "data" / FIXTURE)
    return _load_fixture(str(path))


# -- encode / decode ---------------------------------------------------------


def ldpc_encode(msg, code: LdpcCode) -> np.ndarray:
    """Systematic codeword ``[msg | parity]``; accepts ``(k,)`` or ``(B, k)``."""
    msg = np.asarray(msg, dtype=np.uint8)
    single = msg.ndim == 1
    msg = np.atleast_2d(msg)
    if msg.shape[1] != code.k:
        raise ValueError(f"message length {msg.shape[1]} != k={code.k}")
    parity = (msg.astype(np.int64) @ code.parity_map.T.astype(np.int64)) % 2
    c = np.concatenate([msg, parity.astype(np.uint8)], axis=1)
    return c[0] if single else c


def _phi(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, _TINY, _MAX_LLR)
    return np.log1p(2.0 / np.expm1(x))  # -log(tanh(x/2))


def ldpc_decode(llrs, code: LdpcCode, max_iters: int = 50):
    """Flooding sum-product decoding with early stop on a zero syndrome.

    For a single ``(n,)`` input returns ``(message, success, iterations)``;
    for ``(B, n)`` returns a :class:`DecodeResult` with per-block arrays.
    """
    L = np.asarray(llrs, dtype=np.float64)
    single = L.ndim == 1
    L = np.atleast_2d(L)
    if L.shape[1] != code.n:
        raise ValueError(f"expected {code.n} LLRs per block, got {L.shape[1]}")
    B = L.shape[0]
    L = np.clip(L, -_MAX_LLR, _MAX_LLR)
    ev = code.edge_var
    starts = code.chk_start
    deg = code.chk_deg

    out_bits = (L < 0).astype(np.uint8)
    success = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=np.int64)
    active = ~(code.syndrome(out_bits) == 0).all(axis=1)
    success[~active] = True

    v2c = L[:, ev].copy()  # variable-to-check messages on every edge
    for it in range(1, max_iters + 1):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        m = v2c[idx]
        mag = _phi(np.abs(m))
        neg = (m < 0).astype(np.int64)
        tot_mag = np.repeat(np.add.reduceat(mag, starts, axis=1), deg, axis=1)
        tot_neg = np.repeat(np.add.reduceat(neg, starts, axis=1), deg, axis=1)
        sign = 1.0 - 2.0 * ((tot_neg - neg) % 2)
        c2v = sign * _phi(tot_mag - mag)
        total = L[idx] + (code.var_incidence.T @ c2v.T).T
        v2c[idx] = total[:, ev] - c2v
        hard = (total < 0).astype(np.uint8)
        ok = (code.syndrome(hard) == 0).all(axis=1)
        out_bits[idx] = hard
        iters[idx] = it
        success[idx[ok]] = True
        active[idx[ok]] = False

    msg = out_bits[:, : code.k]
    if single:
        return msg[0], bool(success[0]), int(iters[0])
    return DecodeResult(msg, success, iters)


def main(argv=None):
    ap = argparse.ArgumentParser(description="Generate a PEG LDPC code and write it as an alist file.")
    ap.add_argument("--n", type=int, default=1536)
    ap.add_argument("--k", type=int, default=1024)
    ap.add_argument("--var-degree", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args(argv)
    code = build_code(args.n, args.k, args.var_degree, args.seed)
    args.out.write_text(code.to_alist_text())
    print(f"wrote {args.out}: n={code.n} k={code.k} edges={code.n_edges}")


if __name__ == "__main__":
    main()
