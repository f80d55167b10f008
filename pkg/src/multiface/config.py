"""Training/model configuration shared by the trainer, evaluator and CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .losses import LossWeights


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_images: int = 16
    group_size: int = 40
    channels: int = 8
    d_model: int = 128
    heads: int = 4
    d_ff: int = 256
    global_hidden: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    lambda_local: float = 1.0
    lambda_pull: float = 4.0
    lambda_push: float = 1.0
    seed: int = 0
    no_sm: bool = False
    no_global: bool = False
    no_pull: bool = False
    no_push: bool = False
    metric_input: str = "encoder"
    global_input: str = "encoder"
    pool: str = "max"
    token_order: str = "sorted"
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        for name in ("epochs", "batch_images", "channels", "d_model", "heads", "d_ff", "global_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.metric_input not in ("backbone", "encoder"):
            raise ValueError(f"metric_input must be backbone|encoder, got {self.metric_input!r}")
        if self.global_input not in ("backbone", "encoder"):
            raise ValueError(f"global_input must be backbone|encoder, got {self.global_input!r}")
        if self.pool not in ("mean", "max"):
            raise ValueError(f"pool must be mean|max, got {self.pool!r}")
        if self.token_order not in ("sorted", "slot"):
            raise ValueError(f"token_order must be sorted|slot, got {self.token_order!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")
        LossWeights(self.lambda_local, self.lambda_pull, self.lambda_push)

    @property
    def weights(self) -> LossWeights:
        """Loss weights with ablated terms zeroed out."""
        return LossWeights(
            local=self.lambda_local,
            pull=0.0 if self.no_pull else self.lambda_pull,
            push=0.0 if self.no_push else self.lambda_push,
            global_=0.0 if self.no_global else 1.0,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
