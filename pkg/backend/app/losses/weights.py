from __future__ import annotations

import math
from dataclasses import dataclass


MI_FLOOR = 1e-6
SUM_TOLERANCE = 1e-12

_TINY = math.ulp(0.0)
_BELOW_TWO = math.nextafter(2.0, 0.0)


@dataclass(frozen=True)
class BalancedWeights:
    """(λ_w, λ_l) for one pair; they sum to 2 and the better-understood response gets less."""

    lambda_w: float
    lambda_l: float
    alpha: float = 0.0

    def __post_init__(self) -> None:
        if not (self.alpha >= 0):
            raise ValueError("alpha must be >= 0")
        for name in ("lambda_w", "lambda_l"):
            v = getattr(self, name)
            if not (0.0 < v < 2.0):
                raise ValueError(f"{name} must lie strictly inside (0, 2), got {v}")
        if abs(self.lambda_w + self.lambda_l - 2.0) > SUM_TOLERANCE:
            raise ValueError("lambda_w + lambda_l must equal 2")
        if self.alpha == 0 and not self.is_unit:
            raise ValueError("alpha = 0 requires lambda_w = lambda_l = 1")

    @property
    def is_unit(self) -> bool:
        return self.lambda_w == 1.0 and self.lambda_l == 1.0


UNIT = BalancedWeights(lambda_w=1.0, lambda_l=1.0, alpha=0.0)


def _sigmoid_pair(t: float) -> tuple[float, float]:
    """(σ(t), σ(-t)) without overflow."""
    if t >= 0:
        e = math.exp(-t)
        return 1.0 / (1.0 + e), e / (1.0 + e)
    e = math.exp(t)
    return e / (1.0 + e), 1.0 / (1.0 + e)


def balanced_weights(mi_w: float, mi_l: float, alpha: float) -> BalancedWeights:
    """
    λ_w = 2·I_l^α / (I_w^α + I_l^α), λ_l = 2·I_w^α / (I_w^α + I_l^α) with both MI values
    floored at MI_FLOOR first.

    Evaluated as λ_w = 2σ(-t), λ_l = 2σ(t) with t = α(ln I_w − ln I_l), so large α or
    extreme ratios cannot overflow. Saturated weights are nudged back inside (0, 2).
    """
    if not (alpha >= 0):
        raise ValueError("alpha must be >= 0")
    if not (math.isfinite(mi_w) and math.isfinite(mi_l)):
        raise ValueError("mutual information values must be finite")
    if alpha == 0:
        return BalancedWeights(lambda_w=1.0, lambda_l=1.0, alpha=alpha)

    t = alpha * (math.log(max(mi_w, MI_FLOOR)) - math.log(max(mi_l, MI_FLOOR)))
    s_pos, s_neg = _sigmoid_pair(t)
    lambda_w = min(max(2.0 * s_neg, _TINY), _BELOW_TWO)
    lambda_l = min(max(2.0 * s_pos, _TINY), _BELOW_TWO)
    return BalancedWeights(lambda_w=lambda_w, lambda_l=lambda_l, alpha=alpha)
