from __future__ import annotations

import numpy as np
import pytest

from app.training.gradcheck import FD_TOLERANCE, run_gradcheck, sample_case


def test_gradients_pass() -> None:
    report = run_gradcheck(seed=0, trials=10)
    assert report.passed
    assert set(report.fd_errors) == {"dpo", "dpo-bw", "dpo-sf", "bdpo"}
    assert all(e < FD_TOLERANCE for e in report.fd_errors.values())
    assert report.contract_total_difference > 1e-9


def test_injected_fault_is_caught() -> None:
    report = run_gradcheck(seed=0, trials=3, fault=True)
    assert not report.fd_passed
    assert not report.analytic_passed
    assert not report.passed


def test_same_seed_same_report() -> None:
    assert run_gradcheck(seed=5, trials=2) == run_gradcheck(seed=5, trials=2)


def test_sampled_cases_are_generic() -> None:
    rng = np.random.default_rng(1)
    for _ in range(20):
        case = sample_case(rng)
        assert not case.weights.is_unit
        assert case.pair.preferred != case.pair.dispreferred
        assert case.policy.config == case.ref.config
        assert not case.policy.same_values(case.ref)


def test_rejects_zero_trials() -> None:
    with pytest.raises(ValueError):
        run_gradcheck(seed=0, trials=0)


def test_hundred_trials_pass() -> None:
    report = run_gradcheck(seed=0, trials=100)
    assert report.passed
    assert report.contract_error < 1e-12
