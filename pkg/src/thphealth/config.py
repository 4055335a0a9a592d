"""Training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


@dataclass(frozen=True)
class TrainConfig:
    # event types
    K: int = 3
    # encoder
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    dropout: float = 0.1
    max_len: int = 512
    # intensity head and objective
    beta: float = 1.0
    n_quad: int = 32
    gamma_type: float = 1.0
    gamma_time: float = 0.1
    weighted_ce: bool = True
    # optimization
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        positive = ["K", "d", "n_heads", "d_ff", "max_len", "beta", "batch_size", "learning_rate", "warmup_steps", "clip_norm"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ["n_layers", "epochs", "weight_decay", "gamma_type", "gamma_time"]:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        if self.d % 2:
            raise ValueError("d must be even for the temporal encoding")
        if self.n_quad < 2:
            raise ValueError("n_quad must be at least 2")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)
