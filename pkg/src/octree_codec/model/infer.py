"""Deterministic single-precision inference used by the encoder and decoder.

Rows of a window are pushed through the network one at a time, keeping the
per-layer keys and values of earlier rows in a cache.  A row's result only
depends on the rows before it, and every row goes through the exact same
sequence of float32 operations whether the window is processed in one call
(encoder) or row by row (decoder), so both sides see bit-identical
probabilities.  Loops are explicit and compiled without fast-math so the
summation order is fixed.
"""
from __future__ import annotations

import numba as nb
import numpy as np

from .network import check_indices
from .params import N_SYMBOLS, ModelParams, param_shapes

CDF_BITS = 16
CDF_TOTAL = 1 << CDF_BITS

_LN_EPS = np.float32(1e-5)


def _pack(params: ModelParams):
    shapes = param_shapes(params.config)
    offs = np.zeros(len(shapes) + 1, dtype=np.int64)
    for i, (_, shape) in enumerate(shapes):
        offs[i + 1] = offs[i] + int(np.prod(shape))
    flat = np.empty(offs[-1], dtype=np.float32)
    for i, (name, _) in enumerate(shapes):
        flat[offs[i]:offs[i + 1]] = params[name].astype(np.float32).ravel()
    c = params.config
    cfg = np.array([c.d_occ, c.d_lvl, c.d_oct, c.level_max, c.K, c.layers,
                    c.head_dim, c.mlp_hidden, c.out_hidden], dtype=np.int64)
    return flat, offs, cfg


@nb.njit(cache=True)
def _layer_norm(x, g, b, out):
    n = x.shape[0]
    s = np.float32(0.0)
    for i in range(n):
        s += x[i]
    mu = s / np.float32(n)
    v = np.float32(0.0)
    for i in range(n):
        d = x[i] - mu
        v += d * d
    rstd = np.float32(1.0) / np.sqrt(v / np.float32(n) + _LN_EPS)
    for i in range(n):
        out[i] = (x[i] - mu) * rstd * g[i] + b[i]


@nb.njit(cache=True)
def _matvec(x, W, bias, out):
    # out = bias + x @ W, accumulated row by row of W
    n_out = W.shape[1]
    for j in range(n_out):
        out[j] = bias[j]
    for i in range(W.shape[0]):
        xi = x[i]
        for j in range(n_out):
            out[j] += xi * W[i, j]


@nb.njit(cache=True)
def _run_rows(flat, offs, cfg, rows, start, stop, kcache, vcache, want, out):
    d_occ, d_lvl, d_oct = cfg[0], cfg[1], cfg[2]
    level_max, K, layers = cfg[3], cfg[4], cfg[5]
    dh, mh, oh = cfg[6], cfg[7], cfg[8]
    ds = d_occ + d_lvl + d_oct
    D = K * ds
    emb_occ = flat[offs[0]:offs[1]].reshape((256, d_occ))
    emb_lvl = flat[offs[1]:offs[2]].reshape((level_max + 1, d_lvl))
    emb_oct = flat[offs[2]:offs[3]].reshape((9, d_oct))

    x = np.empty(D, dtype=np.float32)
    y = np.empty(D, dtype=np.float32)
    q = np.empty(dh, dtype=np.float32)
    c = np.empty(K * dh, dtype=np.float32)
    h = np.empty(mh, dtype=np.float32)
    z = np.empty(D, dtype=np.float32)
    ho = np.empty(oh, dtype=np.float32)
    logits = np.empty(N_SYMBOLS, dtype=np.float32)
    scores = np.empty(kcache.shape[2], dtype=np.float32)
    zero_dh = np.zeros(dh, dtype=np.float32)

    for r in range(start, stop):
        for t in range(K):
            base = t * ds
            o, lv, oc = rows[r, t, 0], rows[r, t, 1], rows[r, t, 2]
            for e in range(d_occ):
                x[base + e] = emb_occ[o, e]
            for e in range(d_lvl):
                x[base + d_occ + e] = emb_lvl[lv, e]
            for e in range(d_oct):
                x[base + d_occ + d_lvl + e] = emb_oct[oc, e]

        for l in range(layers):
            p = 3 + 11 * l
            ln_g = flat[offs[p]:offs[p + 1]]
            ln_b = flat[offs[p + 1]:offs[p + 2]]
            wq = flat[offs[p + 2]:offs[p + 3]].reshape((K, ds, dh))
            bq = flat[offs[p + 3]:offs[p + 4]].reshape((K, dh))
            wk = flat[offs[p + 4]:offs[p + 5]].reshape((K, ds, dh))
            wv = flat[offs[p + 5]:offs[p + 6]].reshape((K, ds, dh))
            bv = flat[offs[p + 6]:offs[p + 7]].reshape((K, dh))
            w1 = flat[offs[p + 7]:offs[p + 8]].reshape((K * dh, mh))
            b1 = flat[offs[p + 8]:offs[p + 9]]
            w2 = flat[offs[p + 9]:offs[p + 10]].reshape((mh, D))
            b2 = flat[offs[p + 10]:offs[p + 11]]

            _layer_norm(x, ln_g, ln_b, y)
            for t in range(K):
                yt = y[t * ds:(t + 1) * ds]
                _matvec(yt, wq[t], bq[t], q)
                _matvec(yt, wk[t], zero_dh, kcache[l, t, r])
                _matvec(yt, wv[t], bv[t], vcache[l, t, r])
                m = np.float32(-np.inf)
                for n in range(r + 1):
                    s = np.float32(0.0)
                    kn = kcache[l, t, n]
                    for e in range(dh):
                        s += q[e] * kn[e]
                    scores[n] = s
                    if s > m:
                        m = s
                tot = np.float32(0.0)
                for n in range(r + 1):
                    a = np.exp(scores[n] - m)
                    scores[n] = a
                    tot += a
                ct = c[t * dh:(t + 1) * dh]
                ct[:] = zero_dh
                for n in range(r + 1):
                    a = scores[n] / tot
                    vn = vcache[l, t, n]
                    for e in range(dh):
                        ct[e] += a * vn[e]
            _matvec(c, w1, b1, h)
            for j in range(mh):
                if h[j] < 0:
                    h[j] = 0
            _matvec(h, w2, b2, z)
            for j in range(D):
                x[j] += z[j]

        if want[r]:
            p = 3 + 11 * layers
            _layer_norm(x, flat[offs[p]:offs[p + 1]], flat[offs[p + 1]:offs[p + 2]], y)
            _matvec(y, flat[offs[p + 2]:offs[p + 3]].reshape((D, oh)),
                    flat[offs[p + 3]:offs[p + 4]], ho)
            for j in range(oh):
                if ho[j] < 0:
                    ho[j] = 0
            _matvec(ho, flat[offs[p + 4]:offs[p + 5]].reshape((oh, N_SYMBOLS)),
                    flat[offs[p + 5]:offs[p + 6]], logits)
            m = logits[0]
            for j in range(1, N_SYMBOLS):
                if logits[j] > m:
                    m = logits[j]
            tot = np.float32(0.0)
            for j in range(N_SYMBOLS):
                e = np.exp(logits[j] - m)
                out[r, j] = e
                tot += e
            for j in range(N_SYMBOLS):
                out[r, j] = out[r, j] / tot


@nb.njit(cache=True)
def _quantize_probs(p, cdf):
    n = p.shape[0]
    s = 0.0
    for i in range(n):
        s += np.float64(p[i])
    if not s > 0.0:
        raise ValueError("probabilities do not sum to a positive number")
    budget = CDF_TOTAL - n
    freq = np.empty(n, dtype=np.int64)
    frac = np.empty(n, dtype=np.float64)
    total = 0
    for i in range(n):
        v = np.float64(p[i]) / s * budget
        if not v >= 0.0:
            raise ValueError("invalid probability")
        f = np.floor(v)
        freq[i] = np.int64(f) + 1
        frac[i] = v - f
        total += freq[i]
    rem = CDF_TOTAL - total
    if rem > 0:
        # largest remainders first; ties keep the lower symbol first
        order = np.argsort(-frac, kind="mergesort")
        for j in range(rem):
            freq[order[j]] += 1
    elif rem < 0:
        best = 0
        for i in range(n):
            if freq[i] > freq[best]:
                best = i
        freq[best] += rem
    cdf[0] = 0
    for i in range(n):
        cdf[i + 1] = cdf[i] + freq[i]


def quantize_dist(p) -> np.ndarray:
    """Integer CDF (256 entries, 0 .. 2^16) with every frequency >= 1."""
    p = np.ascontiguousarray(p, dtype=np.float32)
    if p.shape != (N_SYMBOLS,):
        raise ValueError(f"expected {N_SYMBOLS} probabilities, got shape {p.shape}")
    cdf = np.empty(N_SYMBOLS + 1, dtype=np.int64)
    _quantize_probs(p, cdf)
    return cdf


@nb.njit(cache=True)
def _quantize_many(P, out):
    for i in range(P.shape[0]):
        _quantize_probs(P[i], out[i])


def quantize_dists(P) -> np.ndarray:
    P = np.ascontiguousarray(P, dtype=np.float32)
    out = np.empty((P.shape[0], N_SYMBOLS + 1), dtype=np.int64)
    _quantize_many(P, out)
    return out


class InferenceEngine:
    """Row-incremental inference over one window at a time.

    ``reset(rows)`` starts a window; ``run(stop, want)`` advances the cache up
    to row ``stop`` and returns the probabilities of the rows flagged in
    ``want``.  Rows may be modified before they are reached.
    """

    def __init__(self, params: ModelParams, N: int):
        self.params = params
        self.config = params.config
        self.N = int(N)
        self.flat, self.offs, self.cfg = _pack(params)
        c = self.config
        shape = (c.layers, c.K, self.N, c.head_dim)
        self.kcache = np.zeros(shape, dtype=np.float32)
        self.vcache = np.zeros(shape, dtype=np.float32)
        self.out = np.zeros((self.N, N_SYMBOLS), dtype=np.float32)
        self.want = np.zeros(self.N, dtype=np.bool_)
        self.rows = np.zeros((self.N, c.K, 3), dtype=np.int64)
        self.pos = 0

    def reset(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        if rows.shape != self.rows.shape:
            raise ValueError(f"window rows must have shape {self.rows.shape}, got {rows.shape}")
        check_indices(rows, self.config.level_max)
        self.rows[:] = rows
        self.pos = 0

    def set_row(self, r: int, row: np.ndarray) -> None:
        if r < self.pos:
            raise ValueError(f"row {r} was already processed")
        row = np.asarray(row, dtype=np.int64)
        check_indices(row, self.config.level_max)
        self.rows[r] = row

    def run(self, stop: int, want_from: int | None = None) -> np.ndarray:
        """Process rows ``[pos, stop)``; rows ``>= want_from`` produce output."""
        start = self.pos
        if not start <= stop <= self.N:
            raise ValueError(f"cannot advance from row {start} to {stop}")
        self.want[:] = False
        lo = stop if want_from is None else max(start, want_from)
        self.want[lo:stop] = True
        _run_rows(self.flat, self.offs, self.cfg, self.rows, start, stop,
                  self.kcache, self.vcache, self.want, self.out)
        self.pos = stop
        return self.out[lo:stop]

    def window_probs(self, rows: np.ndarray, n_targets: int) -> np.ndarray:
        """All target distributions of a window in one propagation."""
        self.reset(rows)
        return self.run(self.N, self.N - n_targets).copy()
