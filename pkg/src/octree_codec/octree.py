"""Octree construction and breadth-first serialization.

A node at level ``d`` (root is level 1) owns a cube of side ``2^(L-d+1)``
cells and carries an 8-bit occupancy code: bit ``b`` is set when child
``b = (x_bit << 2) | (y_bit << 1) | z_bit`` holds at least one point.
Nodes are emitted level by level; within a level, children follow their
parent's order and ascend by child index.  That order is exactly the sort
order of the Morton keys built with the same bit layout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MAX_DEPTH, QuantizedCloud

POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


class StructuralDecodeError(ValueError):
    """A node sequence is not a valid breadth-first octree serialization."""


@dataclass
class NodeSequence:
    """Breadth-first list of octree nodes.

    ``parent[i]`` is the sequence index of node ``i``'s parent (-1 for the
    root).  ``octant`` of the root is 0.
    """

    occupancy: np.ndarray
    level: np.ndarray
    octant: np.ndarray
    parent: np.ndarray
    depth: int

    def __len__(self):
        return len(self.occupancy)

    @classmethod
    def from_occupancies(cls, occupancy, depth: int) -> "NodeSequence":
        """Recover levels, octants and parents from the occupancy codes alone."""
        occ = np.asarray(occupancy, dtype=np.int64)
        depth = int(depth)
        if len(occ) == 0:
            raise StructuralDecodeError("empty node sequence")
        if occ.min() < 1 or occ.max() > 255:
            bad = int(np.argmax((occ < 1) | (occ > 255)))
            raise StructuralDecodeError(f"invalid occupancy {occ[bad]} at position {bad}")
        level = np.empty(len(occ), dtype=np.int64)
        octant = np.empty(len(occ), dtype=np.int64)
        parent = np.empty(len(occ), dtype=np.int64)
        level[0], octant[0], parent[0] = 1, 0, -1
        start, stop = 0, 1
        for d in range(1, depth):
            parents = np.arange(start, stop)
            counts = POPCOUNT[occ[start:stop]]
            total = int(counts.sum())
            if stop + total > len(occ):
                raise StructuralDecodeError(
                    f"truncated sequence: level {d + 1} needs {total} nodes, "
                    f"{len(occ) - stop} remain")
            bits = (occ[start:stop, None] >> np.arange(8)) & 1
            pi, ci = np.nonzero(bits)
            level[stop:stop + total] = d + 1
            octant[stop:stop + total] = ci
            parent[stop:stop + total] = parents[pi]
            start, stop = stop, stop + total
        if stop != len(occ):
            raise StructuralDecodeError(
                f"sequence has {len(occ)} nodes but the depth-{depth} tree ends at {stop}")
        return cls(occ, level, octant, parent, depth)

    def validate(self) -> None:
        ref = NodeSequence.from_occupancies(self.occupancy, self.depth)
        for name in ("level", "octant", "parent"):
            if not np.array_equal(getattr(ref, name), getattr(self, name)):
                raise StructuralDecodeError(f"{name} array inconsistent with occupancies")


def code_to_children(occupancy: int) -> set[int]:
    occupancy = int(occupancy)
    if not 1 <= occupancy <= 255:
        raise ValueError(f"occupancy must be in [1, 255], got {occupancy}")
    return {b for b in range(8) if occupancy >> b & 1}


def children_to_code(children) -> int:
    code = 0
    for b in children:
        b = int(b)
        if not 0 <= b <= 7:
            raise ValueError(f"child index must be in [0, 7], got {b}")
        code |= 1 << b
    if code == 0:
        raise ValueError("a node needs at least one occupied child")
    return code


def morton_encode(coords: np.ndarray, depth: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    key = np.zeros(len(coords), dtype=np.int64)
    for bit in range(depth - 1, -1, -1):
        child = (((coords[:, 0] >> bit) & 1) << 2) | (((coords[:, 1] >> bit) & 1) << 1) \
            | ((coords[:, 2] >> bit) & 1)
        key = (key << 3) | child
    return key


def morton_decode(keys: np.ndarray, depth: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    coords = np.zeros((len(keys), 3), dtype=np.int64)
    for bit in range(depth):
        child = (keys >> (3 * bit)) & 7
        coords[:, 0] |= ((child >> 2) & 1) << bit
        coords[:, 1] |= ((child >> 1) & 1) << bit
        coords[:, 2] |= (child & 1) << bit
    return coords


def build(qc: QuantizedCloud) -> NodeSequence:
    depth = qc.depth
    coords = qc.coords
    if len(coords) == 0:
        raise ValueError("cannot build an octree from an empty cloud")
    if coords.min() < 0 or coords.max() > (1 << depth) - 1:
        raise ValueError(f"coordinate outside [0, 2^{depth} - 1]")
    keys = np.unique(morton_encode(coords, depth))

    occ_parts, lvl_parts, oct_parts, par_parts = [], [], [], []
    prev_keys = None
    base = 0
    for d in range(1, depth + 1):
        node_keys = np.unique(keys >> (3 * (depth - d + 1)))
        child_keys = np.unique(keys >> (3 * (depth - d)))
        owner = np.searchsorted(node_keys, child_keys >> 3)
        occ = np.zeros(len(node_keys), dtype=np.int64)
        np.bitwise_or.at(occ, owner, 1 << (child_keys & 7))
        occ_parts.append(occ)
        lvl_parts.append(np.full(len(node_keys), d, dtype=np.int64))
        if d == 1:
            oct_parts.append(np.zeros(1, dtype=np.int64))
            par_parts.append(np.full(1, -1, dtype=np.int64))
        else:
            oct_parts.append(node_keys & 7)
            par_parts.append(base + np.searchsorted(prev_keys, node_keys >> 3))
            base += len(prev_keys)
        prev_keys = node_keys
    return NodeSequence(
        np.concatenate(occ_parts), np.concatenate(lvl_parts),
        np.concatenate(oct_parts), np.concatenate(par_parts), depth)


def reconstruct(ns: NodeSequence, qs: float = 1.0, offset=(0.0, 0.0, 0.0)) -> QuantizedCloud:
    """Inverse of :func:`build`; ``qs`` and ``offset`` are carried through."""
    occ = np.asarray(ns.occupancy, dtype=np.int64)
    depth = int(ns.depth)
    if len(occ) == 0:
        raise StructuralDecodeError("empty node sequence")
    if not 1 <= depth <= MAX_DEPTH:
        raise StructuralDecodeError(f"invalid depth {depth}")
    # validates child counts, occupancy range and total length
    NodeSequence.from_occupancies(occ, depth)
    keys = np.zeros(1, dtype=np.int64)
    start = 0
    for _ in range(depth):
        level_occ = occ[start:start + len(keys)]
        start += len(keys)
        bits = (level_occ[:, None] >> np.arange(8)) & 1
        pi, ci = np.nonzero(bits)
        keys = (keys[pi] << 3) | ci
    return QuantizedCloud(morton_decode(keys, depth), offset, qs, depth)


def cell_centers(ns: NodeSequence) -> np.ndarray:
    """Center of every node's cube in grid-cell units (cell indices are centers)."""
    depth = ns.depth
    keys = np.zeros(len(ns), dtype=np.int64)
    origin = np.zeros((len(ns), 3), dtype=np.float64)
    for d in range(2, depth + 1):
        sel = np.nonzero(ns.level == d)[0]
        keys[sel] = (keys[ns.parent[sel]] << 3) | ns.octant[sel]
        origin[sel] = morton_decode(keys[sel], d - 1)
    side = (1 << (depth - np.asarray(ns.level) + 1)).astype(np.float64)[:, None]
    return origin * side + (side - 1) / 2
