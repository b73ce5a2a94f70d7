"""Linear block codes: parity-check matrices, encoding, RV puncturing and decoding.

LLRs follow the ``log P(b=1)/P(b=0)`` convention used throughout the package,
so a positive value favours bit 1.  The min-sum decoder works internally on
the negated values and converts back for its outputs and snapshots.
"""
from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from numba import njit

log = logging.getLogger(__name__)


class CodeError(ValueError):
    pass


@dataclass(frozen=True)
class ParityCheckMatrix:
    """Sparse binary parity-check matrix with check/variable adjacency."""

    n_checks: int
    n_bits: int
    rows: np.ndarray  # edge -> check index, edges sorted by check
    cols: np.ndarray  # edge -> bit index

    def __post_init__(self):
        if len(self.rows) != len(self.cols):
            raise CodeError("row/col edge arrays differ in length")
        order = np.lexsort((self.cols, self.rows))
        object.__setattr__(self, "rows", np.asarray(self.rows, dtype=np.int64)[order])
        object.__setattr__(self, "cols", np.asarray(self.cols, dtype=np.int64)[order])
        pairs = self.rows * self.n_bits + self.cols
        if len(np.unique(pairs)) != len(pairs):
            raise CodeError("duplicate entries in parity-check matrix")
        if np.any(np.bincount(self.cols, minlength=self.n_bits) == 0):
            raise CodeError("parity-check matrix has an all-zero column")

    @classmethod
    def from_dense(cls, H) -> "ParityCheckMatrix":
        H = np.asarray(H) % 2
        r, c = np.nonzero(H)
        return cls(H.shape[0], H.shape[1], r, c)

    def to_dense(self) -> np.ndarray:
        H = np.zeros((self.n_checks, self.n_bits), dtype=np.uint8)
        H[self.rows, self.cols] = 1
        return H

    @property
    def n_edges(self) -> int:
        return len(self.rows)

    def row_weights(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_checks)

    def col_weights(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_bits)

    def check_neighbors(self) -> list[np.ndarray]:
        bounds = np.searchsorted(self.rows, np.arange(self.n_checks + 1))
        return [self.cols[bounds[i]:bounds[i + 1]] for i in range(self.n_checks)]

    def bit_neighbors(self) -> list[np.ndarray]:
        order = np.argsort(self.cols, kind="stable")
        bounds = np.searchsorted(self.cols[order], np.arange(self.n_bits + 1))
        return [self.rows[order[bounds[j]:bounds[j + 1]]] for j in range(self.n_bits)]

    def syndrome(self, bits) -> np.ndarray:
        """Syndrome of a bit vector or a ``(batch, n_bits)`` array."""
        bits = np.asarray(bits, dtype=np.int64)
        if bits.shape[-1] != self.n_bits:
            raise CodeError(f"expected {self.n_bits} bits, got {bits.shape[-1]}")
        flat = bits.reshape(-1, self.n_bits)
        out = (self.sparse() @ flat.T).T % 2
        return out.reshape(bits.shape[:-1] + (self.n_checks,)).astype(np.uint8)

    def sparse(self) -> sp.csr_matrix:
        cached = self.__dict__.get("_sparse")
        if cached is None:
            cached = sp.csr_matrix(
                (np.ones(self.n_edges, dtype=np.int64), (self.rows, self.cols)),
                shape=(self.n_checks, self.n_bits),
            )
            object.__setattr__(self, "_sparse", cached)
        return cached

    def count_4cycles(self) -> int:
        """Number of 4-cycles, i.e. pairs of columns sharing two or more rows."""
        H = sp.csr_matrix(
            (np.ones(self.n_edges, dtype=np.int64), (self.rows, self.cols)),
            shape=(self.n_checks, self.n_bits),
        )
        overlap = (H.T @ H).toarray()
        np.fill_diagonal(overlap, 0)
        shared = overlap[np.triu_indices(self.n_bits, k=1)]
        return int(np.sum(shared * (shared - 1) // 2))

    def girth(self) -> int:
        """Length of the shortest cycle of the Tanner graph (0 if acyclic)."""
        bit_adj = self.bit_neighbors()
        chk_adj = self.check_neighbors()
        best = np.inf
        # BFS from every bit node; Tanner graphs are bipartite so cycles are even
        for root in range(self.n_bits):
            dist = {("b", root): 0}
            parent = {("b", root): None}
            queue = deque([("b", root)])
            while queue:
                node = queue.popleft()
                d = dist[node]
                if 2 * d + 1 >= best:
                    break
                kind, idx = node
                nbrs = [("c", int(c)) for c in bit_adj[idx]] if kind == "b" else [
                    ("b", int(b)) for b in chk_adj[idx]]
                for nb in nbrs:
                    if nb == parent[node]:
                        continue
                    if nb in dist:
                        best = min(best, d + dist[nb] + 1)
                    else:
                        dist[nb] = d + 1
                        parent[nb] = node
                        queue.append(nb)
        return 0 if best == np.inf else int(best)


# ---------------------------------------------------------------------------
# alist I/O


def read_alist(path) -> ParityCheckMatrix:
    tokens = Path(path).read_text().split()
    it = iter(int(t) for t in tokens)
    n, m = next(it), next(it)
    max_cw, max_rw = next(it), next(it)
    col_w = [next(it) for _ in range(n)]
    row_w = [next(it) for _ in range(m)]
    rows, cols = [], []
    for j in range(n):
        entries = [next(it) for _ in range(max_cw)]
        for e in entries[:col_w[j]]:
            rows.append(e - 1)
            cols.append(j)
    # the row section duplicates the information; validate it
    seen = set(zip(rows, cols))
    for i in range(m):
        entries = [next(it) for _ in range(max_rw)]
        for e in entries[:row_w[i]]:
            if (i, e - 1) not in seen:
                raise CodeError(f"alist row/column sections disagree at ({i}, {e - 1})")
    return ParityCheckMatrix(m, n, np.array(rows), np.array(cols))


def write_alist(H: ParityCheckMatrix, path) -> None:
    bit_adj = H.bit_neighbors()
    chk_adj = H.check_neighbors()
    max_cw = max(len(a) for a in bit_adj)
    max_rw = max(len(a) for a in chk_adj)

    def pad(a, w):
        vals = [str(int(x) + 1) for x in sorted(a)]
        return " ".join(vals + ["0"] * (w - len(vals)))

    lines = [f"{H.n_bits} {H.n_checks}", f"{max_cw} {max_rw}",
             " ".join(str(len(a)) for a in bit_adj),
             " ".join(str(len(a)) for a in chk_adj)]
    lines += [pad(a, max_cw) for a in bit_adj]
    lines += [pad(a, max_rw) for a in chk_adj]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# construction


def make_regular_ldpc(n: int, row_weight: int, col_weight: int, seed: int = 0) -> ParityCheckMatrix:
    """Progressive-edge-growth construction of a (col_weight, row_weight)-regular code.

    Each new edge of a bit node goes to a check at maximum Tanner-graph distance,
    preferring checks with the lowest current degree; ties are broken by a seeded
    RNG. Row degrees are capped at ``row_weight`` so the result is exactly regular.
    """
    if n * col_weight % row_weight:
        raise CodeError(f"infeasible degree profile: {n}*{col_weight} not divisible by {row_weight}")
    if col_weight < 1 or row_weight < 2:
        raise CodeError("weights must be col_weight >= 1, row_weight >= 2")
    m = n * col_weight // row_weight
    if col_weight > m:
        raise CodeError("column weight exceeds number of checks")
    rng = np.random.default_rng(seed)
    chk_deg = np.zeros(m, dtype=np.int64)
    bit_adj: list[list[int]] = [[] for _ in range(n)]
    chk_adj: list[list[int]] = [[] for _ in range(m)]

    for v in range(n):
        for _ in range(col_weight):
            open_ = chk_deg < row_weight
            open_[bit_adj[v]] = False
            if not bit_adj[v]:
                cand = np.flatnonzero(open_)
            else:
                cand = _farthest_checks(v, bit_adj, chk_adj, open_, m)
            low = cand[chk_deg[cand] == chk_deg[cand].min()]
            c = int(rng.choice(low))
            bit_adj[v].append(c)
            chk_adj[c].append(v)
            chk_deg[c] += 1

    rows = np.concatenate([np.full(len(a), j) for j, a in enumerate(chk_adj)])
    cols = np.concatenate([np.asarray(a, dtype=np.int64) for a in chk_adj])
    H = ParityCheckMatrix(m, n, rows, cols)
    n4 = H.count_4cycles()
    if n4:
        log.info("PEG construction left %d 4-cycles (n=%d)", n4, n)
    return H


def _farthest_checks(v, bit_adj, chk_adj, open_, m):
    """Open checks not reachable from ``v``, else those at the largest BFS depth."""
    reached = np.zeros(m, dtype=bool)
    frontier = list(bit_adj[v])
    reached[frontier] = True
    seen_bits = {v}
    last_open = np.flatnonzero(open_ & reached)
    while True:
        nxt = []
        for c in frontier:
            for b in chk_adj[c]:
                if b in seen_bits:
                    continue
                seen_bits.add(b)
                for c2 in bit_adj[b]:
                    if not reached[c2]:
                        reached[c2] = True
                        nxt.append(c2)
        unreached = np.flatnonzero(open_ & ~reached)
        if not nxt:
            return unreached if len(unreached) else last_open
        if len(unreached) == 0:
            # every open check is now reachable: keep the ones reached last
            layer = np.zeros(m, dtype=bool)
            layer[nxt] = True
            deepest = np.flatnonzero(open_ & layer)
            if len(deepest):
                return deepest
            return last_open if len(last_open) else np.flatnonzero(open_)
        current = np.flatnonzero(open_ & reached)
        if len(current):
            last_open = current
        frontier = nxt


def hamming74() -> tuple[ParityCheckMatrix, "Codebook"]:
    """Systematic (7,4) Hamming code: parity-check matrix and codebook."""
    P = np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=np.uint8)
    G = np.hstack([np.eye(4, dtype=np.uint8), P])
    H = np.hstack([P.T, np.eye(3, dtype=np.uint8)])
    return ParityCheckMatrix.from_dense(H), Codebook(G)


# ---------------------------------------------------------------------------
# encoding


@dataclass
class Encoder:
    """Systematic encoder derived from a parity-check matrix by GF(2) elimination."""

    H: ParityCheckMatrix
    info_pos: np.ndarray = field(init=False)
    parity_pos: np.ndarray = field(init=False)
    A: np.ndarray = field(init=False)  # parity bits = A @ msg (mod 2)

    def __post_init__(self):
        R = self.H.to_dense().astype(np.uint8)
        m, n = R.shape
        pivots = []
        r = 0
        for c in range(n):
            if r == m:
                break
            hit = np.flatnonzero(R[r:, c])
            if not len(hit):
                continue
            p = r + hit[0]
            if p != r:
                R[[r, p]] = R[[p, r]]
            others = np.flatnonzero(R[:, c])
            others = others[others != r]
            R[others] ^= R[r]
            pivots.append(c)
            r += 1
        self.parity_pos = np.array(pivots, dtype=np.int64)
        self.info_pos = np.setdiff1d(np.arange(n), self.parity_pos)
        self.A = R[:len(pivots)][:, self.info_pos].astype(np.int64)

    @property
    def k(self) -> int:
        return len(self.info_pos)

    @property
    def n(self) -> int:
        return self.H.n_bits

    def generator(self) -> np.ndarray:
        G = np.zeros((self.k, self.n), dtype=np.uint8)
        G[np.arange(self.k), self.info_pos] = 1
        G[:, self.parity_pos] = self.A.T % 2
        return G

    def encode(self, msg) -> np.ndarray:
        msg = np.asarray(msg, dtype=np.int64)
        if msg.shape[-1] != self.k:
            raise CodeError(f"message length {msg.shape[-1]} != k={self.k}")
        cw = np.zeros(msg.shape[:-1] + (self.n,), dtype=np.uint8)
        cw[..., self.info_pos] = msg
        cw[..., self.parity_pos] = (msg @ self.A.T) % 2
        return cw

    def extract(self, codeword) -> np.ndarray:
        return np.asarray(codeword)[..., self.info_pos]


def encode(msg, code) -> np.ndarray:
    """Encode with an :class:`Encoder` or a :class:`Codebook`."""
    if isinstance(code, Codebook):
        return code.encode(msg)
    return code.encode(msg)


# ---------------------------------------------------------------------------
# redundancy versions


@dataclass(frozen=True)
class RvSchedule:
    """Partition of coded-bit positions into ``t_max`` redundancy versions."""

    n_bits: int
    t_max: int
    rv_of: np.ndarray  # position -> RV index

    @classmethod
    def round_robin(cls, n_bits: int, t_max: int) -> "RvSchedule":
        if n_bits % t_max:
            raise CodeError("n_bits must be divisible by t_max for equal-length RVs")
        return cls(n_bits, t_max, np.arange(n_bits) % t_max)

    def positions(self, rv: int) -> np.ndarray:
        return np.flatnonzero(self.rv_of == rv)

    def received_mask(self, received_rvs: int) -> np.ndarray:
        if not 1 <= received_rvs <= self.t_max:
            raise CodeError(f"received_rvs must be in [1, {self.t_max}]")
        return self.rv_of < received_rvs


def puncture(values, schedule: RvSchedule, received_rvs: int) -> np.ndarray:
    """Zero (erase) every position belonging to an RV that was not received."""
    values = np.asarray(values, dtype=np.float64)
    return np.where(schedule.received_mask(received_rvs), values, 0.0)


# ---------------------------------------------------------------------------
# min-sum decoding


@dataclass
class DecodeResult:
    syndrome_ok: np.ndarray  # (B,) bool
    hard_bits: np.ndarray  # (B, n) uint8
    posterior: np.ndarray  # (B, n) final a-posteriori LLRs
    iterations_used: np.ndarray  # (B,) int
    snapshots: np.ndarray | None = None  # (B, n_it + 1, n), k=0 is the channel LLR
    success: np.ndarray | None = None  # syndrome ok and (if known) codeword match
    undetected: np.ndarray | None = None  # syndrome ok but wrong codeword

    def __post_init__(self):
        if self.success is None:
            self.success = self.syndrome_ok.copy()

    def __len__(self):
        return len(self.syndrome_ok)


@njit(cache=True)
def _minsum_kernel(L_ch, chk_ptr, chk_cols, bit_ptr, bit_edges, scale, max_iter, n_snap,
                   post_out, iters_out, ok_out, snaps):
    B, n = L_ch.shape
    E = len(chk_cols)
    m = len(chk_ptr) - 1
    c2v = np.empty(E)
    v2c = np.empty(E)
    post = np.empty(n)
    for b in range(B):
        for e in range(E):
            c2v[e] = 0.0
        for j in range(n):
            post[j] = L_ch[b, j]
        done = False
        used = 0
        for k in range(1, max_iter + 1):
            if not done:
                used = k
                for c in range(m):
                    m1 = np.inf
                    m2 = np.inf
                    i1 = -1
                    par = 0
                    for e in range(chk_ptr[c], chk_ptr[c + 1]):
                        x = post[chk_cols[e]] - c2v[e]
                        v2c[e] = x
                        a = abs(x)
                        if x < 0:
                            par ^= 1
                        if a < m1:
                            m2 = m1
                            m1 = a
                            i1 = e
                        elif a < m2:
                            m2 = a
                    for e in range(chk_ptr[c], chk_ptr[c + 1]):
                        mag = m2 if e == i1 else m1
                        s = par ^ (1 if v2c[e] < 0 else 0)
                        c2v[e] = -scale * mag if s else scale * mag
                for j in range(n):
                    acc = L_ch[b, j]
                    for q in range(bit_ptr[j], bit_ptr[j + 1]):
                        acc += c2v[bit_edges[q]]
                    post[j] = acc
                done = True
                for c in range(m):
                    par = 0
                    for e in range(chk_ptr[c], chk_ptr[c + 1]):
                        if post[chk_cols[e]] < 0:
                            par ^= 1
                    if par:
                        done = False
                        break
            if k <= n_snap:
                for j in range(n):
                    snaps[b, k, j] = -post[j]
            if done and k >= n_snap:
                break
        for j in range(n):
            post_out[b, j] = post[j]
        iters_out[b] = used
        ok_out[b] = done


class MinSumDecoder:
    """Normalized min-sum decoder with flooding schedule, batched over frames.

    One instance holds the edge layout of a parity-check matrix and can be
    reused; per-call buffers are allocated inside :meth:`decode`. A frame stops
    updating once its syndrome is zero; later snapshots repeat its final state.
    """

    def __init__(self, H: ParityCheckMatrix, scale: float = 0.75):
        self.H = H
        self.scale = float(scale)
        self.chk_ptr = np.searchsorted(H.rows, np.arange(H.n_checks + 1)).astype(np.int64)
        self.chk_cols = H.cols.astype(np.int64)
        order = np.argsort(H.cols, kind="stable")
        self.bit_edges = order.astype(np.int64)
        self.bit_ptr = np.searchsorted(H.cols[order], np.arange(H.n_bits + 1)).astype(np.int64)

    def decode(self, llr, max_iter: int = 50, n_snapshots: int = 0,
               codeword=None) -> DecodeResult:
        llr = np.atleast_2d(np.asarray(llr, dtype=np.float64))
        B, n = llr.shape
        if n != self.H.n_bits:
            raise CodeError(f"LLR length {n} != n_bits {self.H.n_bits}")
        if n_snapshots > max_iter:
            raise CodeError("max_iter must be >= number of snapshot iterations")
        if not np.all(np.isfinite(llr)):
            raise CodeError("non-finite channel LLRs")
        post = np.empty((B, n))
        iters = np.empty(B, dtype=np.int64)
        ok = np.empty(B, dtype=np.bool_)
        snaps = np.empty((B, n_snapshots + 1, n))
        snaps[:, 0] = llr
        # internal convention: log P(0)/P(1)
        _minsum_kernel(np.ascontiguousarray(-llr), self.chk_ptr, self.chk_cols, self.bit_ptr,
                       self.bit_edges, self.scale, int(max_iter), int(n_snapshots),
                       post, iters, ok, snaps)
        hard_bits = (post < 0).astype(np.uint8)
        res = DecodeResult(ok, hard_bits, -post, iters, snaps if n_snapshots else None)
        if codeword is not None:
            cw = np.atleast_2d(np.asarray(codeword, dtype=np.uint8))
            match = np.all(hard_bits == cw, axis=1)
            res.success = ok & match
            res.undetected = ok & ~match
        return res


def minsum_decode(llr, H: ParityCheckMatrix, max_iter: int = 50, n_snapshots: int = 10,
                  scale: float = 0.75, codeword=None) -> DecodeResult:
    """Decode one frame or a batch; see :class:`MinSumDecoder`."""
    return MinSumDecoder(H, scale).decode(llr, max_iter, n_snapshots, codeword)


# ---------------------------------------------------------------------------
# small codes and bounded-distance decoding


class Codebook:
    """Explicit codebook of a small binary linear code (n <= 20)."""

    def __init__(self, G):
        self.G = np.asarray(G, dtype=np.uint8) % 2
        self.k, self.n = self.G.shape
        if self.n > 20:
            raise CodeError("codebook enumeration limited to n <= 20")
        msgs = np.array(list(itertools.product([0, 1], repeat=self.k)), dtype=np.int64)
        self.messages = msgs.astype(np.uint8)
        self.codewords = ((msgs @ self.G) % 2).astype(np.uint8)
        w = self.codewords.sum(axis=1)
        self.d_min = int(w[w > 0].min())
        self.t = (self.d_min - 1) // 2

    def encode(self, msg) -> np.ndarray:
        msg = np.asarray(msg, dtype=np.int64)
        if msg.shape[-1] != self.k:
            raise CodeError(f"message length {msg.shape[-1]} != k={self.k}")
        return ((msg @ self.G) % 2).astype(np.uint8)

    def check_parity(self, H: ParityCheckMatrix) -> bool:
        return not np.any((self.G.astype(np.int64) @ H.to_dense().T.astype(np.int64)) % 2)


def hard_decision_decode(received, codebook: Codebook):
    """Bounded-distance decoding: message of the codeword within distance t, else None."""
    r = np.asarray(received, dtype=np.uint8)
    dist = np.sum(codebook.codewords != r, axis=1)
    i = int(np.argmin(dist))
    if dist[i] <= codebook.t:
        return codebook.messages[i].copy()
    return None


def hard_decision_decode_batch(received, codebook: Codebook):
    """Vectorized variant: returns (messages, ok) for a ``(B, n)`` array."""
    r = np.atleast_2d(np.asarray(received, dtype=np.uint8))
    dist = np.sum(codebook.codewords[None, :, :] != r[:, None, :], axis=2)
    i = np.argmin(dist, axis=1)
    ok = dist[np.arange(len(r)), i] <= codebook.t
    return codebook.messages[i], ok
