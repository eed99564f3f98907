"""Deterministic training loop, evaluation, experiments and gradient checks."""
