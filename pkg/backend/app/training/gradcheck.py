from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from app.dataset.pairs import SAFE, PreferencePair
from app.losses.preference import (
    LossVariant,
    bdpo_analytic_gradient,
    inner_analytic_gradient,
    inner_loss_tensor,
    pair_rewards,
    scaling_factor,
    variant_gradient,
)
from app.losses.weights import UNIT, BalancedWeights, balanced_weights
from app.policy.model import (
    DTYPE,
    ModelConfig,
    PolicyParameters,
    ReferenceSnapshot,
    init_params,
    sequence_logprob,
    sequence_logprob_tensor,
)
from app.policy.vocab import TokenSequence, with_bos


logger = logging.getLogger(__name__)

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
ANALYTIC_TOLERANCE = 1e-10
CONTRACT_TOLERANCE = 1e-12
CONTRACT_MIN_DIFFERENCE = 1e-9
DIRECTIONS = 3
COORDINATES = 8
FAULT_SCALE = 1e-2


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)."""
    denom = max(float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(b)), 1e-12)
    return float(torch.linalg.vector_norm(a - b)) / denom


@dataclass(frozen=True)
class GradcheckCase:
    policy: PolicyParameters
    ref: ReferenceSnapshot
    pair: PreferencePair
    beta: float
    weights: BalancedWeights


def _tokens(rng: np.random.Generator, vocab_size: int, n: int) -> TokenSequence:
    # content ids only: bos is 0
    return TokenSequence.of(int(t) for t in rng.integers(1, vocab_size, size=n))


def sample_case(rng: np.random.Generator) -> GradcheckCase:
    """Small random model, reference, pair, β and λ ≠ (1, 1)."""
    vocab_size = int(rng.integers(4, 9))
    q_len = int(rng.integers(1, 3))
    w_len = int(rng.integers(1, 4))
    l_len = int(rng.integers(1, 4))
    query = _tokens(rng, vocab_size, q_len)
    preferred = _tokens(rng, vocab_size, w_len)
    dispreferred = _tokens(rng, vocab_size, l_len)
    while dispreferred == preferred:
        dispreferred = _tokens(rng, vocab_size, l_len)

    config = ModelConfig(
        vocab_size=vocab_size,
        embed_dim=int(rng.integers(2, 4)),
        context_window=1 + q_len + max(w_len, l_len) + int(rng.integers(0, 2)),
        hidden_dim=int(rng.integers(2, 5)),
        seed=int(rng.integers(0, 2**31)),
    )
    policy = init_params(config)
    ref = ReferenceSnapshot(config=config, values=init_params(replace(config, seed=config.seed + 1)).values)

    mi_w, mi_l = (float(v) for v in rng.uniform(0.05, 2.0, size=2))
    weights = balanced_weights(mi_w, mi_l, float(rng.uniform(0.5, 2.5)))
    pair = PreferencePair(
        query=query, preferred=preferred, dispreferred=dispreferred, safety_label=SAFE, pair_id="gradcheck"
    )
    return GradcheckCase(policy=policy, ref=ref, pair=pair, beta=float(rng.uniform(0.1, 1.0)), weights=weights)


def frozen_objective(variant: LossVariant, case: GradcheckCase, theta: torch.Tensor, factor: float) -> float:
    """Variant loss at `theta` with the scaling factor held at `factor`."""
    config = case.policy.config
    prefix = with_bos(config.bos_id, case.pair.query)
    ref_w = sequence_logprob(case.ref, prefix, case.pair.preferred)
    ref_l = sequence_logprob(case.ref, prefix, case.pair.dispreferred)
    with torch.no_grad():
        r_w = case.beta * (sequence_logprob_tensor(config, theta, prefix, case.pair.preferred) - ref_w)
        r_l = case.beta * (sequence_logprob_tensor(config, theta, prefix, case.pair.dispreferred) - ref_l)
        inner = inner_loss_tensor(r_w, r_l, case.weights if variant.uses_weights_inside else UNIT)
    value = float(inner)
    return factor * value if variant.uses_scaling_factor else value


def finite_difference_error(
    variant: LossVariant, case: GradcheckCase, grad: torch.Tensor, rng: np.random.Generator
) -> float:
    """
    Relative error between `grad` and central differences of the frozen-factor objective,
    along random unit directions and on a random subset of coordinates.
    """
    theta0 = case.policy.values
    r_w, r_l = pair_rewards(case.policy, case.ref, case.pair, case.beta)
    factor = scaling_factor(r_w, r_l, case.weights)

    def slope(direction: torch.Tensor) -> float:
        plus = frozen_objective(variant, case, theta0 + FD_STEP * direction, factor)
        minus = frozen_objective(variant, case, theta0 - FD_STEP * direction, factor)
        return (plus - minus) / (2 * FD_STEP)

    n = theta0.numel()
    expected: list[float] = []
    numeric: list[float] = []
    for _ in range(DIRECTIONS):
        u = torch.from_numpy(rng.standard_normal(n)).to(DTYPE)
        u = u / torch.linalg.vector_norm(u)
        expected.append(float(grad @ u))
        numeric.append(slope(u))
    for i in rng.choice(n, size=min(COORDINATES, n), replace=False):
        e = torch.zeros(n, dtype=DTYPE)
        e[int(i)] = 1.0
        expected.append(float(grad[int(i)]))
        numeric.append(slope(e))
    return relative_error(torch.tensor(expected, dtype=DTYPE), torch.tensor(numeric, dtype=DTYPE))


@dataclass(frozen=True)
class GradcheckReport:
    seed: int
    trials: int
    fd_errors: dict[str, float] = field(default_factory=dict)
    inner_analytic_error: float = 0.0
    bdpo_analytic_error: float = 0.0
    contract_error: float = 0.0
    contract_total_difference: float = 0.0

    @property
    def fd_passed(self) -> bool:
        return all(e < FD_TOLERANCE for e in self.fd_errors.values())

    @property
    def analytic_passed(self) -> bool:
        return self.inner_analytic_error < ANALYTIC_TOLERANCE and self.bdpo_analytic_error < ANALYTIC_TOLERANCE

    @property
    def contract_passed(self) -> bool:
        return self.contract_error < CONTRACT_TOLERANCE and self.contract_total_difference > CONTRACT_MIN_DIFFERENCE

    @property
    def passed(self) -> bool:
        return self.fd_passed and self.analytic_passed and self.contract_passed


def run_gradcheck(seed: int, trials: int, *, fault: bool = False) -> GradcheckReport:
    """
    Randomized gradient verification. Each field holds the maximum over trials, except
    contract_total_difference, the largest gap seen between the implemented (frozen-factor)
    and the total derivative. `fault` corrupts the autodiff gradients as a negative control.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")

    def autodiff(variant: LossVariant, case: GradcheckCase, *, stop_gradient: bool = True) -> torch.Tensor:
        g = variant_gradient(variant, case.policy, case.ref, case.pair, case.beta, case.weights, stop_gradient=stop_gradient)
        return g * (1.0 + FAULT_SCALE) if fault else g

    fd_errors = {v.value: 0.0 for v in LossVariant}
    inner_err = bdpo_err = contract_err = total_diff = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        case = sample_case(rng)

        grads = {v: autodiff(v, case) for v in LossVariant}
        for v, g in grads.items():
            fd_errors[v.value] = max(fd_errors[v.value], finite_difference_error(v, case, g, rng))

        args = (case.policy, case.ref, case.pair, case.beta, case.weights)
        inner_err = max(inner_err, relative_error(inner_analytic_gradient(*args), grads[LossVariant.DPO_BW]))
        bdpo_err = max(bdpo_err, relative_error(bdpo_analytic_gradient(*args), grads[LossVariant.BDPO]))

        r_w, r_l = pair_rewards(case.policy, case.ref, case.pair, case.beta)
        frozen = scaling_factor(r_w, r_l, case.weights) * grads[LossVariant.DPO_BW]
        contract_err = max(contract_err, relative_error(grads[LossVariant.BDPO], frozen))
        total = autodiff(LossVariant.BDPO, case, stop_gradient=False)
        total_diff = max(total_diff, relative_error(grads[LossVariant.BDPO], total))

    report = GradcheckReport(
        seed=seed,
        trials=trials,
        fd_errors=fd_errors,
        inner_analytic_error=inner_err,
        bdpo_analytic_error=bdpo_err,
        contract_error=contract_err,
        contract_total_difference=total_diff,
    )
    logger.info(
        "gradcheck seed=%d trials=%d: fd=%s inner=%.3g bdpo=%.3g contract=%.3g total-diff=%.3g -> %s",
        seed,
        trials,
        {k: f"{e:.3g}" for k, e in fd_errors.items()},
        inner_err,
        bdpo_err,
        contract_err,
        total_diff,
        "pass" if report.passed else "FAIL",
    )
    return report
