"""Sliding context windows over a breadth-first node sequence.

Every window row describes one node by ``K`` slots: the node itself and its
``K - 1`` nearest ancestors.  A slot holds ``(occupancy, level, octant)``
indices.  Index 0 is padding for occupancy and level, 8 for octant.

A row that is a prediction target cannot carry its own occupancy (the
decoder does not know it yet), so its slot-0 occupancy is the occupancy of
the previous node in the sequence.  Rows that are only context carry their
true occupancy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .octree import NodeSequence

PAD_OCC = 0
PAD_LEVEL = 0
PAD_OCTANT = 8


@dataclass
class ContextWindow:
    rows: np.ndarray          # (N, K, 3) int64
    positions: np.ndarray     # (N,) sequence positions, -1 for padding rows
    n_targets: int            # the last n_targets rows are predicted
    targets: np.ndarray       # (n_targets,) true occupancies

    @property
    def target_positions(self) -> np.ndarray:
        return self.positions[len(self.positions) - self.n_targets:]


def pad_row(K: int) -> np.ndarray:
    row = np.empty((K, 3), dtype=np.int64)
    row[:] = (PAD_OCC, PAD_LEVEL, PAD_OCTANT)
    return row


def feature_table(ns: NodeSequence, K: int) -> np.ndarray:
    """Rows for every node with true occupancies, shape ``(n, K, 3)``."""
    n = len(ns)
    table = np.empty((n, K, 3), dtype=np.int64)
    table[:] = (PAD_OCC, PAD_LEVEL, PAD_OCTANT)
    cur = np.arange(n)
    for t in range(K):
        ok = cur >= 0
        idx = cur[ok]
        table[ok, t, 0] = ns.occupancy[idx]
        table[ok, t, 1] = ns.level[idx]
        table[ok, t, 2] = ns.octant[idx]
        nxt = np.full(n, -1, dtype=np.int64)
        nxt[ok] = ns.parent[idx]
        cur = nxt
    return table


def previous_occupancy(ns: NodeSequence) -> np.ndarray:
    prev = np.empty(len(ns), dtype=np.int64)
    prev[0] = PAD_OCC
    prev[1:] = ns.occupancy[:-1]
    return prev


def assemble_row(ns: NodeSequence, position: int, K: int, target: bool = True) -> np.ndarray:
    if not 0 <= position < len(ns):
        raise IndexError(f"position {position} outside sequence of length {len(ns)}")
    row = pad_row(K)
    node = position
    for t in range(K):
        if node < 0:
            break
        row[t] = (ns.occupancy[node], ns.level[node], ns.octant[node])
        node = int(ns.parent[node])
    if target:
        row[0, 0] = ns.occupancy[position - 1] if position > 0 else PAD_OCC
    return row


def window_spans(n: int, N0: int) -> list[tuple[int, int]]:
    """Target ranges ``[t0, t1)`` of consecutive windows; the last may be short."""
    if N0 < 1:
        raise ValueError("N0 must be >= 1")
    return [(t0, min(t0 + N0, n)) for t0 in range(0, n, N0)]


def window_rows(table: np.ndarray, prev_occ: np.ndarray, t0: int, t1: int, N: int):
    """Rows of the window whose targets are positions ``[t0, t1)``.

    The window ends at ``t1 - 1`` and spans ``N`` positions; positions
    before the sequence start become padding rows.
    """
    K = table.shape[1]
    positions = np.arange(t1 - N, t1)
    rows = np.empty((N, K, 3), dtype=np.int64)
    rows[:] = (PAD_OCC, PAD_LEVEL, PAD_OCTANT)
    real = positions >= 0
    rows[real] = table[positions[real]]
    tsel = slice(N - (t1 - t0), N)
    rows[tsel, 0, 0] = prev_occ[positions[tsel]]
    positions = np.where(real, positions, -1)
    return rows, positions


def build_windows(ns: NodeSequence, N: int, K: int, N0: int) -> Iterator[ContextWindow]:
    if N < 1 or K < 1 or not 1 <= N0 <= N:
        raise ValueError(f"need N >= 1, K >= 1, 1 <= N0 <= N (got N={N}, K={K}, N0={N0})")
    table = feature_table(ns, K)
    prev = previous_occupancy(ns)
    for t0, t1 in window_spans(len(ns), N0):
        rows, positions = window_rows(table, prev, t0, t1, N)
        yield ContextWindow(rows, positions, t1 - t0, ns.occupancy[t0:t1].copy())


def receptive_fields(N: int, N0: int) -> np.ndarray:
    """Number of window rows visible to each of the ``N0`` targets of a full window."""
    return np.arange(N - N0 + 1, N + 1)


def mean_receptive_field(N: int, N0: int) -> float:
    return (2 * N - N0 + 1) / 2
