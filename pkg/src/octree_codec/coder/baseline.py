"""Adaptive order-0 model over the 255 occupancy symbols."""
from __future__ import annotations

import numba as nb
import numpy as np

from ..model.infer import CDF_TOTAL
from ..model.params import N_SYMBOLS


@nb.njit(cache=True)
def _quantize_counts(counts, cdf):
    n = counts.shape[0]
    total = 0
    for i in range(n):
        total += counts[i]
    budget = CDF_TOTAL - n
    freq = np.empty(n, dtype=np.int64)
    rem = np.empty(n, dtype=np.int64)
    used = 0
    for i in range(n):
        num = counts[i] * budget
        freq[i] = num // total + 1
        rem[i] = num % total
        used += freq[i]
    left = CDF_TOTAL - used
    if left > 0:
        order = np.argsort(-rem, kind="mergesort")
        for j in range(left):
            freq[order[j]] += 1
    cdf[0] = 0
    for i in range(n):
        cdf[i + 1] = cdf[i] + freq[i]


class AdaptiveModel:
    """Symbol counts start at 1 and grow by 1 after each coded symbol.

    Encoder and decoder evolve the same counts, so the CDF handed to the
    range coder is identical on both sides.  Quantization is pure integer
    arithmetic.
    """

    def __init__(self):
        self.counts = np.ones(N_SYMBOLS, dtype=np.int64)
        self._cdf = np.empty(N_SYMBOLS + 1, dtype=np.int64)

    def cdf(self) -> np.ndarray:
        _quantize_counts(self.counts, self._cdf)
        return self._cdf

    def update(self, symbol: int) -> None:
        self.counts[symbol] += 1


def adaptive_code_length(symbols) -> float:
    """Ideal bits of coding ``symbols`` (0-based) with the quantized adaptive model."""
    m = AdaptiveModel()
    bits = 0.0
    for s in symbols:
        c = m.cdf()
        bits -= np.log2((c[s + 1] - c[s]) / CDF_TOTAL)
        m.update(s)
    return bits
