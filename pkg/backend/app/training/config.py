from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from app.losses.preference import LossVariant


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adaptive-moment"

    @classmethod
    def parse(cls, tag: str) -> OptimizerKind:
        try:
            return cls(tag)
        except ValueError:
            raise ValueError(f"unknown optimizer {tag!r} (expected 'sgd' or 'adaptive-moment')") from None


@dataclass(frozen=True)
class TrainConfig:
    variant: LossVariant
    beta: float
    learning_rate: float
    alpha: float = 1.5
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not isinstance(self.variant, LossVariant):
            raise ValueError("variant must be a LossVariant")
        if not (self.beta > 0):
            raise ValueError("beta must be > 0")
        if not (self.learning_rate >= 0):
            raise ValueError("learning_rate must be >= 0")
        if not (self.alpha >= 0):
            raise ValueError("alpha must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("adam_betas must lie in [0, 1)")
        if not (self.adam_eps > 0):
            raise ValueError("adam_eps must be > 0")


@dataclass(frozen=True)
class SftConfig:
    """Supervised warm-up of a reference model on the responses of a pair set."""

    learning_rate: float = 0.05
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0
    include_dispreferred: bool = True

    def __post_init__(self) -> None:
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
