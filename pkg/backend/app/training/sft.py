from __future__ import annotations

import logging
from typing import Sequence

import torch

from app.dataset.pairs import PreferencePair
from app.policy.model import PolicyParameters, check_prefix_target, sequence_logprob_tensor
from app.policy.vocab import TokenSequence, with_bos
from app.training.config import SftConfig
from app.training.harness import NumericalError, epoch_order


logger = logging.getLogger(__name__)


def _examples(pairs: Sequence[PreferencePair], include_dispreferred: bool) -> list[tuple[TokenSequence, TokenSequence]]:
    out = [(p.query, p.preferred) for p in pairs]
    if include_dispreferred:
        out.extend((p.query, p.dispreferred) for p in pairs)
    return out


def supervised_warmup(
    config: SftConfig, pairs: Sequence[PreferencePair], init: PolicyParameters
) -> tuple[PolicyParameters, list[float]]:
    """
    Adam on the mean negative log-likelihood −log π(y | x) of the pair responses, used to
    turn a random init into a reference model that has seen the corpus.
    Returns the trained parameters and one loss value per step.
    """
    examples = _examples(pairs, config.include_dispreferred)
    if not examples:
        raise ValueError("supervised warm-up needs at least one pair")

    model_config = init.config
    prepared = []
    for x, y in examples:
        prefix = with_bos(model_config.bos_id, x)
        check_prefix_target(model_config, prefix, y)
        prepared.append((prefix, y))

    theta = init.values.detach().clone().requires_grad_(True)
    optimizer = torch.optim.Adam([theta], lr=config.learning_rate)

    losses: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        order = epoch_order(config.seed, epoch, len(prepared))
        for start in range(0, len(prepared), config.batch_size):
            step += 1
            batch = [prepared[int(i)] for i in order[start : start + config.batch_size]]
            optimizer.zero_grad(set_to_none=True)

            nll = -sequence_logprob_tensor(model_config, theta, *batch[0])
            for prefix, y in batch[1:]:
                nll = nll - sequence_logprob_tensor(model_config, theta, prefix, y)
            loss = nll / len(batch)
            if not bool(torch.isfinite(loss)):
                raise NumericalError(f"non-finite warm-up loss at step {step}", step=step)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        logger.info("warm-up epoch %d/%d: last loss %.6f", epoch + 1, config.epochs, losses[-1])

    return PolicyParameters(config=model_config, values=theta.detach().clone()), losses
