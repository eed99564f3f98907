from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

import torch
import torch.nn.functional as F

from app.losses.weights import UNIT, BalancedWeights
from app.policy.model import (
    DTYPE,
    ModelLike,
    check_prefix_target,
    logprob_gradient,
    sequence_logprob,
    sequence_logprob_tensor,
)
from app.policy.vocab import TokenSequence, with_bos


class LossVariant(str, Enum):
    """
    - dpo: plain DPO, weights ignored
    - dpo-bw: balanced weights inside the sigmoid, no scaling factor
    - dpo-sf: plain DPO inner loss times the frozen scaling factor built from the weights
    - bdpo: balanced weights and the frozen scaling factor
    """

    DPO = "dpo"
    DPO_BW = "dpo-bw"
    DPO_SF = "dpo-sf"
    BDPO = "bdpo"

    @classmethod
    def parse(cls, tag: str) -> LossVariant:
        try:
            return cls(tag)
        except ValueError:
            known = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown loss variant {tag!r} (expected one of: {known})") from None

    @property
    def uses_weights_inside(self) -> bool:
        return self in (LossVariant.DPO_BW, LossVariant.BDPO)

    @property
    def uses_scaling_factor(self) -> bool:
        return self in (LossVariant.DPO_SF, LossVariant.BDPO)


class PairLike(Protocol):
    query: TokenSequence
    preferred: TokenSequence
    dispreferred: TokenSequence


@dataclass(frozen=True)
class ImplicitReward:
    """β · log(π_θ(y|x) / π_ref(y|x)) in nats."""

    value: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise ValueError("implicit reward must be finite")


def _check_beta(beta: float) -> None:
    if not (beta > 0):
        raise ValueError("beta must be > 0")


# --- tensor core (shared by losses, gradients and training) ---


def inner_loss_tensor(r_w: torch.Tensor, r_l: torch.Tensor, weights: BalancedWeights) -> torch.Tensor:
    """−log σ(λ_w r_w − λ_l r_l)."""
    return -F.logsigmoid(weights.lambda_w * r_w - weights.lambda_l * r_l)


def scaling_factor_tensor(r_w: torch.Tensor, r_l: torch.Tensor, weights: BalancedWeights) -> torch.Tensor:
    """σ(r_l − r_w) / σ(λ_l r_l − λ_w r_w), evaluated in log space."""
    return torch.exp(F.logsigmoid(r_l - r_w) - F.logsigmoid(weights.lambda_l * r_l - weights.lambda_w * r_w))


def pair_objective(
    variant: LossVariant,
    r_w: torch.Tensor,
    r_l: torch.Tensor,
    weights: BalancedWeights,
    *,
    stop_gradient: bool = True,
) -> torch.Tensor:
    """
    Per-pair loss from the two implicit rewards. With stop_gradient the scaling factor is
    computed from detached rewards, so no derivative flows through it.
    """
    inner_weights = weights if variant.uses_weights_inside else UNIT
    inner = inner_loss_tensor(r_w, r_l, inner_weights)
    if not variant.uses_scaling_factor:
        return inner
    if stop_gradient:
        factor = scaling_factor_tensor(r_w.detach(), r_l.detach(), weights)
    else:
        factor = scaling_factor_tensor(r_w, r_l, weights)
    return factor * inner


def effective_weights(variant: LossVariant, weights: BalancedWeights) -> BalancedWeights:
    """The weights a variant actually consumes: dpo ignores them."""
    return UNIT if variant is LossVariant.DPO else weights


def variant_scaling_factor(variant: LossVariant, r_w: float, r_l: float, weights: BalancedWeights) -> float:
    if not variant.uses_scaling_factor:
        return 1.0
    return float(scaling_factor_tensor(_scalar(r_w), _scalar(r_l), weights))


def _scalar(x: float) -> torch.Tensor:
    return torch.tensor(x, dtype=DTYPE)


# --- rewards ---


def _reference_logprobs(ref: ModelLike, pair: PairLike) -> tuple[float, float]:
    prefix = with_bos(ref.config.bos_id, pair.query)
    return sequence_logprob(ref, prefix, pair.preferred), sequence_logprob(ref, prefix, pair.dispreferred)


def implicit_reward(policy: ModelLike, ref: ModelLike, x: TokenSequence, y: TokenSequence, beta: float) -> ImplicitReward:
    _check_beta(beta)
    prefix = with_bos(policy.config.bos_id, x)
    return ImplicitReward(value=beta * (sequence_logprob(policy, prefix, y) - sequence_logprob(ref, prefix, y)))


def pair_rewards(policy: ModelLike, ref: ModelLike, pair: PairLike, beta: float) -> tuple[ImplicitReward, ImplicitReward]:
    return (
        implicit_reward(policy, ref, pair.query, pair.preferred, beta),
        implicit_reward(policy, ref, pair.query, pair.dispreferred, beta),
    )


# --- scalar losses ---


def dpo_loss(policy: ModelLike, ref: ModelLike, pair: PairLike, beta: float) -> float:
    """−log σ(r̂_w − r̂_l)."""
    return variant_loss(LossVariant.DPO, policy, ref, pair, beta, UNIT)


def bdpo_inner_loss(policy: ModelLike, ref: ModelLike, pair: PairLike, beta: float, weights: BalancedWeights) -> float:
    """−log σ(λ_w r̂_w − λ_l r̂_l)."""
    return variant_loss(LossVariant.DPO_BW, policy, ref, pair, beta, weights)


def scaling_factor(reward_w: ImplicitReward, reward_l: ImplicitReward, weights: BalancedWeights) -> float:
    """
    σ(r̂_l − r̂_w) / σ(λ_l r̂_l − λ_w r̂_w). Losses treat this as a constant when
    differentiating.
    """
    return float(scaling_factor_tensor(_scalar(reward_w.value), _scalar(reward_l.value), weights))


def bdpo_loss(policy: ModelLike, ref: ModelLike, pair: PairLike, beta: float, weights: BalancedWeights) -> float:
    return variant_loss(LossVariant.BDPO, policy, ref, pair, beta, weights)


def variant_loss(
    variant: LossVariant,
    policy: ModelLike,
    ref: ModelLike,
    pair: PairLike,
    beta: float,
    weights: BalancedWeights,
) -> float:
    r_w, r_l = pair_rewards(policy, ref, pair, beta)
    return float(pair_objective(variant, _scalar(r_w.value), _scalar(r_l.value), weights))


# --- gradients ---


def variant_gradient(
    variant: LossVariant,
    policy: ModelLike,
    ref: ModelLike,
    pair: PairLike,
    beta: float,
    weights: BalancedWeights,
    *,
    stop_gradient: bool = True,
) -> torch.Tensor:
    """
    Reverse-mode ∇θ of the variant loss. stop_gradient=False differentiates through the
    scaling factor as well (the total derivative of the written expression).
    """
    _check_beta(beta)
    config = policy.config
    prefix = with_bos(config.bos_id, pair.query)
    check_prefix_target(config, prefix, pair.preferred)
    check_prefix_target(config, prefix, pair.dispreferred)
    ref_w, ref_l = _reference_logprobs(ref, pair)

    theta = policy.values.detach().clone().requires_grad_(True)
    r_w = beta * (sequence_logprob_tensor(config, theta, prefix, pair.preferred) - ref_w)
    r_l = beta * (sequence_logprob_tensor(config, theta, prefix, pair.dispreferred) - ref_l)
    loss = pair_objective(variant, r_w, r_l, weights, stop_gradient=stop_gradient)
    (grad,) = torch.autograd.grad(loss, theta)
    return grad


def inner_analytic_gradient(
    policy: ModelLike, ref: ModelLike, pair: PairLike, beta: float, weights: BalancedWeights
) -> torch.Tensor:
    """
    −β·σ(λ_l r̂_l − λ_w r̂_w)·[λ_w ∇log π(y_w|x) − λ_l ∇log π(y_l|x)], assembled from the two
    sequence gradients.
    """
    r_w, r_l = pair_rewards(policy, ref, pair, beta)
    prefix = with_bos(policy.config.bos_id, pair.query)
    g_w = logprob_gradient(policy, prefix, pair.preferred)
    g_l = logprob_gradient(policy, prefix, pair.dispreferred)
    z = weights.lambda_l * r_l.value - weights.lambda_w * r_w.value
    coef = -beta * float(torch.sigmoid(_scalar(z)))
    return coef * (weights.lambda_w * g_w - weights.lambda_l * g_l)


def bdpo_analytic_gradient(
    policy: ModelLike, ref: ModelLike, pair: PairLike, beta: float, weights: BalancedWeights
) -> torch.Tensor:
    """Frozen scaling factor × inner_analytic_gradient."""
    r_w, r_l = pair_rewards(policy, ref, pair, beta)
    return scaling_factor(r_w, r_l, weights) * inner_analytic_gradient(policy, ref, pair, beta, weights)
