from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Union

import torch
import torch.nn.functional as F

from app.policy.vocab import MAX_VOCAB_SIZE, InvalidTokenError, TokenSequence


DTYPE = torch.float64
LAYOUT_VERSION = 1


class ContextOverflowError(ValueError):
    """A context (or prefix + target) longer than the model's context window."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int
    context_window: int
    hidden_dim: int
    seed: int = 0
    bos_id: int = 0
    init_scale: float = 0.5

    def __post_init__(self) -> None:
        for name in ("vocab_size", "embed_dim", "context_window", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (2 <= self.vocab_size <= MAX_VOCAB_SIZE):
            raise ValueError(f"vocab_size must be in [2, {MAX_VOCAB_SIZE}]")
        if not (0 <= self.bos_id < self.vocab_size):
            raise ValueError("bos_id must be a valid token index")
        if not (self.init_scale > 0):
            raise ValueError("init_scale must be > 0")


@dataclass(frozen=True)
class ParameterLayout:
    """
    Named slices of the flat parameter vector, in storage order:

    - embeddings (V, d)
    - mixing (W, H, d): one block per relative window offset (0 = most recent token)
    - mixing_bias (H,)
    - projection (V, H)
    - projection_bias (V,)
    """

    shapes: tuple[tuple[str, tuple[int, ...]], ...]

    @classmethod
    def for_config(cls, config: ModelConfig) -> ParameterLayout:
        v, d, w, h = config.vocab_size, config.embed_dim, config.context_window, config.hidden_dim
        return cls(
            shapes=(
                ("embeddings", (v, d)),
                ("mixing", (w, h, d)),
                ("mixing_bias", (h,)),
                ("projection", (v, h)),
                ("projection_bias", (v,)),
            )
        )

    @property
    def size(self) -> int:
        return sum(_numel(shape) for _, shape in self.shapes)

    def slices(self) -> dict[str, slice]:
        out: dict[str, slice] = {}
        start = 0
        for name, shape in self.shapes:
            out[name] = slice(start, start + _numel(shape))
            start += _numel(shape)
        return out

    def unpack(self, values: torch.Tensor) -> dict[str, torch.Tensor]:
        """Reshaped views into `values` (gradients flow back into the flat vector)."""
        shapes = dict(self.shapes)
        return {name: values[sl].view(shapes[name]) for name, sl in self.slices().items()}


def _numel(shape: tuple[int, ...]) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def _check_vector(config: ModelConfig, values: torch.Tensor) -> None:
    if values.dtype != DTYPE or values.dim() != 1:
        raise ValueError("parameter values must be a 1-D float64 tensor")
    expected = ParameterLayout.for_config(config).size
    if values.numel() != expected:
        raise ValueError(f"parameter vector has length {values.numel()}, layout expects {expected}")
    if not bool(torch.isfinite(values).all()):
        raise ValueError("parameter values must be finite")


@dataclass(frozen=True, eq=False)
class PolicyParameters:
    """Trainable parameter vector θ of the policy."""

    config: ModelConfig
    values: torch.Tensor

    def __post_init__(self) -> None:
        _check_vector(self.config, self.values)

    @property
    def layout(self) -> ParameterLayout:
        return ParameterLayout.for_config(self.config)

    def named(self) -> dict[str, torch.Tensor]:
        return self.layout.unpack(self.values)

    def with_values(self, values: torch.Tensor) -> PolicyParameters:
        return PolicyParameters(config=self.config, values=values.detach().clone())

    def same_values(self, other: PolicyParameters | ReferenceSnapshot) -> bool:
        return self.config == other.config and torch.equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class ReferenceSnapshot:
    """Frozen copy of a parameter vector serving as π_ref."""

    config: ModelConfig
    values: torch.Tensor

    def __post_init__(self) -> None:
        _check_vector(self.config, self.values)
        # Own a private copy so later in-place updates of the source cannot leak in.
        object.__setattr__(self, "values", self.values.detach().clone())

    @classmethod
    def freeze(cls, params: PolicyParameters) -> ReferenceSnapshot:
        return cls(config=params.config, values=params.values)

    def as_policy(self) -> PolicyParameters:
        return PolicyParameters(config=self.config, values=self.values.clone())

    def fingerprint(self) -> str:
        return fingerprint_of(self.config, self.values)


ModelLike = Union[PolicyParameters, ReferenceSnapshot]


def fingerprint_of(config: ModelConfig, values: torch.Tensor) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(config), sort_keys=True).encode("utf-8"))
    h.update(values.detach().numpy().astype("<f8").tobytes())
    return h.hexdigest()


def init_params(config: ModelConfig) -> PolicyParameters:
    """
    Uniform(-init_scale, init_scale) draws from a generator seeded with config.seed.
    Equal configs give bitwise-identical vectors.
    """
    gen = torch.Generator().manual_seed(config.seed)
    size = ParameterLayout.for_config(config).size
    values = (torch.rand(size, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * config.init_scale
    return PolicyParameters(config=config, values=values)


# --- validation ---


def _check_ids(config: ModelConfig, ids: tuple[int, ...]) -> None:
    for i in ids:
        if not (0 <= i < config.vocab_size):
            raise InvalidTokenError(f"token id {i} outside vocabulary of size {config.vocab_size}")


def check_context(config: ModelConfig, context: TokenSequence) -> None:
    if context.length < 1 or context.ids[0] != config.bos_id:
        raise ValueError("context must begin with bos_id")
    if context.length > config.context_window:
        raise ContextOverflowError(
            f"context length {context.length} exceeds context_window {config.context_window}"
        )
    _check_ids(config, context.ids)
    if config.bos_id in context.ids[1:]:
        raise InvalidTokenError("bos_id may only appear at the start of a context")


def check_prefix_target(config: ModelConfig, prefix: TokenSequence, target: TokenSequence) -> None:
    if prefix.length < 1 or prefix.ids[0] != config.bos_id:
        raise ValueError("prefix must begin with bos_id")
    if target.length < 1:
        raise ValueError("target must be nonempty")
    total = prefix.length + target.length
    if total > config.context_window:
        raise ContextOverflowError(
            f"prefix + target length {total} exceeds context_window {config.context_window}"
        )
    _check_ids(config, prefix.ids)
    _check_ids(config, target.ids)
    if config.bos_id in prefix.ids[1:] or config.bos_id in target.ids:
        raise InvalidTokenError("bos_id may only appear at the start of a context")


# --- forward pass ---


def step_log_probs_tensor(
    config: ModelConfig, values: torch.Tensor, ids: tuple[int, ...], first: int, steps: int
) -> torch.Tensor:
    """
    Log next-token distributions, shape (steps, V), for the contexts ids[:n] with
    n = first, ..., first + steps - 1. Differentiable w.r.t. `values`; no validation.

    Offsets past the start of a context contribute nothing to the mixing layer.
    """
    p = ParameterLayout.for_config(config).unpack(values)
    window = config.context_window

    lengths = torch.arange(first, first + steps)
    offsets = torch.arange(window)
    positions = lengths[:, None] - 1 - offsets[None, :]  # (steps, W)
    present = positions >= 0

    tokens = torch.tensor(ids, dtype=torch.long)[positions.clamp(min=0)]
    emb = p["embeddings"][tokens]  # (steps, W, d)
    emb = torch.where(present[..., None], emb, torch.zeros((), dtype=DTYPE))

    pre = torch.einsum("skd,khd->sh", emb, p["mixing"]) + p["mixing_bias"]
    hidden = torch.tanh(pre)
    logits = hidden @ p["projection"].T + p["projection_bias"]
    return F.log_softmax(logits, dim=-1)


def sequence_logprob_tensor(
    config: ModelConfig, values: torch.Tensor, prefix: TokenSequence, target: TokenSequence
) -> torch.Tensor:
    """Σ_t log P(target_t | prefix ⊕ target_<t) as a 0-d tensor (graph kept)."""
    full = prefix.ids + target.ids
    log_probs = step_log_probs_tensor(config, values, full, prefix.length, target.length)
    picked = log_probs[torch.arange(target.length), torch.tensor(target.ids, dtype=torch.long)]
    return picked.sum()


# --- public operations ---


def next_token_distribution(params: ModelLike, context: TokenSequence) -> torch.Tensor:
    check_context(params.config, context)
    with torch.no_grad():
        log_probs = step_log_probs_tensor(params.config, params.values, context.ids, context.length, 1)
    return log_probs[0].exp()


def step_log_probs(params: ModelLike, prefix: TokenSequence, target: TokenSequence) -> torch.Tensor:
    """
    Teacher-forced log distributions (L, V): row t conditions on prefix ⊕ target_<t.
    """
    check_prefix_target(params.config, prefix, target)
    with torch.no_grad():
        return step_log_probs_tensor(params.config, params.values, prefix.ids + target.ids, prefix.length, target.length)


def sequence_logprob(params: ModelLike, prefix: TokenSequence, target: TokenSequence) -> float:
    """Raw (not length-normalized) log-probability of `target` after `prefix`."""
    check_prefix_target(params.config, prefix, target)
    with torch.no_grad():
        return float(sequence_logprob_tensor(params.config, params.values, prefix, target))


def logprob_gradient(params: ModelLike, prefix: TokenSequence, target: TokenSequence) -> torch.Tensor:
    """Reverse-mode ∇θ sequence_logprob, same length as the parameter vector."""
    check_prefix_target(params.config, prefix, target)
    theta = params.values.detach().clone().requires_grad_(True)
    lp = sequence_logprob_tensor(params.config, theta, prefix, target)
    (grad,) = torch.autograd.grad(lp, theta)
    return grad
