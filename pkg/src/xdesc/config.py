"""Training hyper-parameters and per-family architecture choices."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .descriptors import AlgorithmSpec
from .errors import ConfigError

HANDCRAFTED_HIDDEN = (1024, 1024)
LEARNED_HIDDEN = (256, 256)
EMBED_DIMS = (16, 32, 64, 128, 256)

# Desk-scale batch: one batch per ~64 patches, capped at the paper's 1024.
DESK_BATCH_DIVISOR = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch: int | None = None
    lr: float = 1e-3
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch is not None and self.batch < 2:
            raise ConfigError("batch must be >= 2 (batch normalization)")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")

    def resolve_batch(self, n: int) -> int:
        """Explicit batch, or ``min(1024, n // 64)`` (at least 2)."""
        batch = self.batch if self.batch is not None else max(2, min(1024, n // DESK_BATCH_DIVISOR))
        if batch > n:
            raise ConfigError(f"batch {batch} larger than dataset ({n} patches)")
        return batch

    def to_dict(self) -> dict:
        return asdict(self)


def hidden_dims_for(spec: AlgorithmSpec) -> tuple[int, ...]:
    return LEARNED_HIDDEN if spec.learned else HANDCRAFTED_HIDDEN


def head_for(spec: AlgorithmSpec) -> str:
    if spec.is_binary:
        return "sigmoid"
    if spec.output_norm == "unit_l2":
        return "relu_then_unit_l2" if spec.nonnegative else "unit_l2"
    return "none"
