"""Model configuration, parameter container and the parameter file format.

File layout (little-endian)::

    magic    4s   b"OCTM"
    version  u16
    config   13 x u32  (see CONFIG_FIELDS)
    tensors  float32, in the order of ``param_shapes``

The SHA-256 of the whole file identifies the model inside bitstream headers.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

MAGIC = b"OCTM"
VERSION = 1
N_SYMBOLS = 255
N_OCC = 256      # occupancy index 0 is padding
N_OCTANT = 9     # octant index 8 is padding


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_occ: int = 32
    d_lvl: int = 6
    d_oct: int = 4
    level_max: int = 16
    K: int = 4
    layers: int = 2
    head_dim: int = 16
    mlp_hidden: int = 128
    out_hidden: int = 128
    # window geometry the model was trained for; coding may override
    N: int = 128
    N0: int = 128
    seed: int = 0
    reserved: int = 0

    @property
    def d_slot(self) -> int:
        return self.d_occ + self.d_lvl + self.d_oct

    @property
    def d_model(self) -> int:
        return self.K * self.d_slot

    @property
    def heads(self) -> int:
        return self.K

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(d_occ=128, d_lvl=6, d_oct=4, K=4, layers=2, head_dim=64,
                    mlp_hidden=512, out_hidden=512, N=1024, N0=1024)
        base.update(kw)
        return cls(**base)


CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    K, ds, dh, D = cfg.K, cfg.d_slot, cfg.head_dim, cfg.d_model
    shapes = [
        ("emb_occ", (N_OCC, cfg.d_occ)),
        ("emb_lvl", (cfg.level_max + 1, cfg.d_lvl)),
        ("emb_oct", (N_OCTANT, cfg.d_oct)),
    ]
    for l in range(cfg.layers):
        p = f"layer{l}."
        shapes += [
            (p + "ln_g", (D,)), (p + "ln_b", (D,)),
            (p + "wq", (K, ds, dh)), (p + "bq", (K, dh)),
            # no key bias: it adds the same q.b to every score of a query
            # row, which the softmax cancels
            (p + "wk", (K, ds, dh)),
            (p + "wv", (K, ds, dh)), (p + "bv", (K, dh)),
            (p + "w1", (K * dh, cfg.mlp_hidden)), (p + "b1", (cfg.mlp_hidden,)),
            (p + "w2", (cfg.mlp_hidden, D)), (p + "b2", (D,)),
        ]
    shapes += [
        ("out.ln_g", (D,)), ("out.ln_b", (D,)),
        ("out.w1", (D, cfg.out_hidden)), ("out.b1", (cfg.out_hidden,)),
        ("out.w2", (cfg.out_hidden, N_SYMBOLS)), ("out.b2", (N_SYMBOLS,)),
    ]
    return shapes


def _fan_in(name: str, shape, cfg: ModelConfig) -> int:
    if name == "emb_occ":
        return N_OCC
    if name == "emb_lvl":
        return cfg.level_max + 1
    if name == "emb_oct":
        return N_OCTANT
    kind = name.split(".")[-1]
    if kind in ("wq", "wk", "wv", "bq", "bv"):
        return cfg.d_slot
    if kind in ("w1", "b1"):
        return cfg.K * cfg.head_dim if not name.startswith("out") else cfg.d_model
    if kind in ("w2", "b2"):
        return cfg.mlp_hidden if not name.startswith("out") else cfg.out_hidden
    raise KeyError(name)


class ModelParams:
    """Named parameter tensors plus their configuration."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        expected = param_shapes(config)
        missing = [n for n, _ in expected if n not in tensors]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        for n, shape in expected:
            if tuple(tensors[n].shape) != shape:
                raise ValueError(f"{n}: expected shape {shape}, got {tensors[n].shape}")
        self.tensors = {n: tensors[n] for n, _ in expected}

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0,
             dtype=np.float32) -> "ModelParams":
        """Uniform in +-1/sqrt(fan_in); layer-norm gains 1 and shifts 0."""
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config):
            if name.endswith("ln_g"):
                t = np.ones(shape)
            elif name.endswith("ln_b"):
                t = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(_fan_in(name, shape, config))
                t = rng.uniform(-bound, bound, size=shape)
            tensors[name] = t.astype(dtype)
        return cls(config, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {n: t.astype(dtype) for n, t in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: t.copy() for n, t in self.tensors.items()})

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<H", VERSION))
        cfg = asdict(self.config)
        buf.write(struct.pack(f"<{len(CONFIG_FIELDS)}I", *(cfg[f] for f in CONFIG_FIELDS)))
        for name, _ in param_shapes(self.config):
            buf.write(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        head = 4 + 2 + 4 * len(CONFIG_FIELDS)
        if len(data) < head or data[:4] != MAGIC:
            raise ModelFileError("not a model file (bad magic)")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != VERSION:
            raise ModelFileError(f"unsupported model file version {version}")
        vals = struct.unpack_from(f"<{len(CONFIG_FIELDS)}I", data, 6)
        config = ModelConfig(**dict(zip(CONFIG_FIELDS, vals)))
        off = head
        tensors = {}
        for name, shape in param_shapes(config):
            count = int(np.prod(shape))
            if off + 4 * count > len(data):
                raise ModelFileError(f"model file truncated inside tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off) \
                .reshape(shape).astype(np.float32)
            off += 4 * count
        if off != len(data):
            raise ModelFileError(f"{len(data) - off} trailing bytes in model file")
        return cls(config, tensors)

    def save(self, path) -> None:
        with open(os.fspath(path), "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(os.fspath(path), "rb") as f:
            return cls.from_bytes(f.read())

    def content_hash(self) -> bytes:
        """SHA-256 of the serialized (float32) model file."""
        return hashlib.sha256(self.to_bytes()).digest()
