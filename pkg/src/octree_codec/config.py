"""Flat ``key = value`` run configuration.

Lines starting with ``#`` and blank lines are ignored.  Unknown keys are an
error so a typo never silently falls back to a default.

Defaults (version 1)::

    N = 128            window length
    K = 4              ancestor slots per node (also the number of heads)
    N0 = 128           targets coded per forward pass
    depth = 10         octree depth L
    d_occ = 32         occupancy embedding width
    d_lvl = 6          level embedding width
    d_oct = 4          octant embedding width
    layers = 2
    heads = 4          must equal K
    head_dim = 16
    mlp_hidden = 128
    out_hidden = 128
    lr = 0.001
    batch_size = 32
    epochs = 8
    max_steps = 0      0 means no limit
    max_seconds = 0    0 means no limit
    lr_floor = 1.0     cosine decay target as a fraction of lr (needs max_steps)
    seed = 0
    peak = 1.0         PSNR peak value r
    normal_k = 16      neighbours for normal estimation
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .model.params import ModelConfig
from .model.train import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    N: int = 128
    K: int = 4
    N0: int = 128
    depth: int = 10
    d_occ: int = 32
    d_lvl: int = 6
    d_oct: int = 4
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    mlp_hidden: int = 128
    out_hidden: int = 128
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 8
    max_steps: int = 0
    max_seconds: float = 0.0
    lr_floor: float = 1.0
    seed: int = 0
    peak: float = 1.0
    normal_k: int = 16
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        if self.heads != self.K:
            raise ConfigError(f"heads ({self.heads}) must equal K ({self.K}): one head per slot")
        if not 1 <= self.N0 <= self.N:
            raise ConfigError(f"need 1 <= N0 <= N, got N={self.N}, N0={self.N0}")
        if not 1 <= self.depth <= 16:
            raise ConfigError(f"depth must be in [1, 16], got {self.depth}")
        for name in ("N", "K", "d_occ", "d_lvl", "d_oct", "layers", "head_dim", "mlp_hidden",
                     "out_hidden", "batch_size", "epochs", "normal_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.lr > 0 or not self.peak > 0:
            raise ConfigError("lr and peak must be positive")

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or not key:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            conv = float if types[key] in (float, "float") else int
            try:
                values[key] = conv(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.parse(f.read())

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        return replace(self, **kw)

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_occ=self.d_occ, d_lvl=self.d_lvl, d_oct=self.d_oct, K=self.K,
                           layers=self.layers, head_dim=self.head_dim,
                           mlp_hidden=self.mlp_hidden, out_hidden=self.out_hidden,
                           N=self.N, N0=self.N0, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.seed, max_steps=self.max_steps or None,
                           max_seconds=self.max_seconds or None, lr_floor=self.lr_floor)
