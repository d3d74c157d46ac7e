"""Bitstream container and the encode/decode drivers.

Header (little-endian, 88 bytes)::

    magic 4s "OCTB" | version u8 | kind u8 (0 baseline, 1 model) | depth u8 | pad u8
    qs f64 | offset 3 x f64
    N u32 | K u16 | N0 u32 | node_count u32 | payload_len u32 | payload_crc32 u32
    model_hash 32s (SHA-256 of the model file, zeros for the baseline)

followed by ``payload_len`` range-coded bytes.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..context import PAD_LEVEL, PAD_OCC, PAD_OCTANT, feature_table, previous_occupancy, \
    window_rows, window_spans
from ..geometry import QuantizedCloud
from ..model.infer import InferenceEngine, quantize_dist, quantize_dists
from ..model.params import ModelParams
from ..octree import NodeSequence, StructuralDecodeError, build, reconstruct
from .baseline import AdaptiveModel
from .rangecoder import RangeDecodeError, RangeDecoder, RangeEncoder

MAGIC = b"OCTB"
VERSION = 1
KIND_BASELINE = 0
KIND_MODEL = 1
_HEADER = struct.Struct("<4sBBBBd3dIHIIII32s")
HEADER_SIZE = _HEADER.size


class BitstreamError(ValueError):
    pass


class ModelMismatchError(BitstreamError):
    pass


class DecodeCorruptionError(BitstreamError):
    pass


@dataclass
class Bitstream:
    depth: int
    qs: float
    offset: tuple
    N: int
    K: int
    N0: int
    node_count: int
    model_hash: bytes | None
    payload: bytes

    @property
    def kind(self) -> int:
        return KIND_BASELINE if self.model_hash is None else KIND_MODEL

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            MAGIC, VERSION, self.kind, self.depth, 0, float(self.qs),
            *(float(v) for v in self.offset), self.N, self.K, self.N0, self.node_count,
            len(self.payload), zlib.crc32(self.payload),
            self.model_hash if self.model_hash is not None else bytes(32))
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_SIZE:
            raise BitstreamError(f"bitstream shorter than its {HEADER_SIZE}-byte header")
        (magic, version, kind, depth, _, qs, ox, oy, oz, N, K, N0, count,
         plen, crc, mhash) = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError("not a bitstream (bad magic)")
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        if kind not in (KIND_BASELINE, KIND_MODEL):
            raise BitstreamError(f"unknown model kind {kind}")
        payload = data[HEADER_SIZE:]
        if len(payload) != plen:
            raise DecodeCorruptionError(
                f"payload length {len(payload)} does not match header ({plen})")
        if plen == 0:
            raise DecodeCorruptionError("empty payload")
        if zlib.crc32(payload) != crc:
            raise DecodeCorruptionError("payload checksum mismatch")
        return cls(depth, qs, (ox, oy, oz), N, K, N0, count,
                   mhash if kind == KIND_MODEL else None, payload)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Bitstream":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _check_model(model: ModelParams, K: int, depth: int) -> None:
    if model.config.K != K:
        raise ValueError(f"model has K={model.config.K}, stream uses K={K}")
    if depth > model.config.level_max:
        raise ValueError(f"depth {depth} exceeds the model's level_max {model.config.level_max}")


def encode(qc: QuantizedCloud, model: ModelParams | None = None, N: int | None = None,
           K: int | None = None, N0: int | None = None, trace: dict | None = None) -> Bitstream:
    """Losslessly code ``qc``; ``model=None`` selects the adaptive baseline.

    ``trace``, when given, receives the symbols and, for the model, the
    window rows and the quantized CDFs fed to the coder.
    """
    ns = build(qc)
    n = len(ns)
    symbols = ns.occupancy - 1
    enc = RangeEncoder()
    cdfs = []
    if model is None:
        N, K, N0 = int(N or 0), int(K or 0), int(N0 or 0)
        m = AdaptiveModel()
        for s in symbols:
            c = m.cdf()
            if trace is not None:
                cdfs.append(c.copy())
            enc.encode_symbol(c, int(s))
            m.update(s)
        mhash = None
    else:
        cfg = model.config
        N = int(N or cfg.N)
        K = int(K or cfg.K)
        N0 = int(N0 or min(cfg.N0, N))
        if not 1 <= N0 <= N:
            raise ValueError(f"need 1 <= N0 <= N, got N={N}, N0={N0}")
        _check_model(model, K, qc.depth)
        table = feature_table(ns, K)
        prev = previous_occupancy(ns)
        engine = InferenceEngine(model, N)
        rows_seen = []
        for t0, t1 in window_spans(n, N0):
            rows, _ = window_rows(table, prev, t0, t1, N)
            P = engine.window_probs(rows, t1 - t0)
            C = quantize_dists(P)
            for j, s in enumerate(symbols[t0:t1]):
                enc.encode_symbol(C[j], int(s))
            if trace is not None:
                rows_seen.append(rows)
                cdfs.extend(C)
        mhash = model.content_hash()
        if trace is not None:
            trace["rows"] = rows_seen
    if trace is not None:
        trace["symbols"] = symbols
        trace["cdfs"] = np.array(cdfs)
    return Bitstream(qc.depth, qc.qs, tuple(qc.offset), N, K, N0, n, mhash, enc.finish())


class _TreeState:
    """Octree nodes discovered so far while decoding breadth-first."""

    def __init__(self, n: int, depth: int):
        self.depth = depth
        self.occ = np.zeros(n, dtype=np.int64)
        self.level = np.zeros(n, dtype=np.int64)
        self.octant = np.zeros(n, dtype=np.int64)
        self.parent = np.full(n, -1, dtype=np.int64)
        self.level[0] = 1
        self.known = 1

    def add(self, p: int, occupancy: int) -> None:
        self.occ[p] = occupancy
        lvl = self.level[p]
        if lvl >= self.depth:
            return
        n = len(self.occ)
        for b in range(8):
            if occupancy >> b & 1:
                k = self.known
                if k >= n:
                    raise DecodeCorruptionError(
                        f"node {p} spawns more children than the header's node count {n}")
                self.level[k] = lvl + 1
                self.octant[k] = b
                self.parent[k] = p
                self.known = k + 1

    def row(self, p: int, K: int, target: bool) -> np.ndarray:
        row = np.empty((K, 3), dtype=np.int64)
        node = p
        for t in range(K):
            if node < 0:
                row[t] = (PAD_OCC, PAD_LEVEL, PAD_OCTANT)
            else:
                row[t] = (self.occ[node], self.level[node], self.octant[node])
                node = self.parent[node]
        if target:
            row[0, 0] = self.occ[p - 1] if p > 0 else PAD_OCC
        return row


def decode(bs: Bitstream | bytes, model: ModelParams | None = None,
           trace: dict | None = None) -> QuantizedCloud:
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    if not bs.payload:
        raise DecodeCorruptionError("empty payload")
    n = bs.node_count
    if n < 1:
        raise DecodeCorruptionError("header declares zero nodes")
    try:
        dec = RangeDecoder(bs.payload)
    except RangeDecodeError as e:
        raise DecodeCorruptionError(str(e)) from None

    if bs.model_hash is None:
        if model is not None:
            raise ModelMismatchError("bitstream was coded with the baseline model")
        occ = np.empty(n, dtype=np.int64)
        m = AdaptiveModel()
        try:
            for p in range(n):
                s = dec.decode_symbol(m.cdf())
                occ[p] = s + 1
                m.update(s)
        except RangeDecodeError as e:
            raise DecodeCorruptionError(str(e)) from None
    else:
        if model is None:
            raise ModelMismatchError("bitstream needs a model file, none given")
        if model.content_hash() != bs.model_hash:
            raise ModelMismatchError("model file hash does not match the bitstream")
        _check_model(model, bs.K, bs.depth)
        occ = _decode_with_model(dec, bs, model, trace)

    try:
        ns = NodeSequence.from_occupancies(occ, bs.depth)
        return reconstruct(ns, bs.qs, bs.offset)
    except StructuralDecodeError as e:
        raise DecodeCorruptionError(f"decoded symbols do not form an octree: {e}") from None


def _decode_with_model(dec: RangeDecoder, bs: Bitstream, model: ModelParams, trace):
    n, N, K, N0 = bs.node_count, bs.N, bs.K, bs.N0
    if not 1 <= N0 <= N:
        raise BitstreamError(f"invalid window geometry N={N}, N0={N0}")
    tree = _TreeState(n, bs.depth)
    engine = InferenceEngine(model, N)
    pad = np.empty((K, 3), dtype=np.int64)
    pad[:] = (PAD_OCC, PAD_LEVEL, PAD_OCTANT)
    rows_seen = []
    for t0, t1 in window_spans(n, N0):
        first = t1 - N
        rows = np.empty((N, K, 3), dtype=np.int64)
        rows[:] = pad
        for r in range(N - (t1 - t0)):
            p = first + r
            rows[r] = pad if p < 0 else tree.row(p, K, target=False)
        engine.reset(rows)
        ctx = N - (t1 - t0)
        engine.run(ctx, ctx)
        for p in range(t0, t1):
            r = p - first
            if p >= tree.known:
                raise DecodeCorruptionError(f"octree ended before node {p} of {n}")
            row = tree.row(p, K, target=True)
            engine.rows[r] = row
            probs = engine.run(r + 1, r)[0]
            cdf = quantize_dist(probs)
            try:
                s = dec.decode_symbol(cdf)
            except RangeDecodeError as e:
                raise DecodeCorruptionError(f"{e} at node {p}") from None
            tree.add(p, s + 1)
            rows[r] = row
        if trace is not None:
            rows_seen.append(rows)
    if tree.known != n:
        raise DecodeCorruptionError(f"octree has {tree.known} nodes, header says {n}")
    if trace is not None:
        trace["rows"] = rows_seen
    return tree.occ
