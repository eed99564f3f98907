"""Tiny autoregressive policy model (pure torch, no CLI imports)."""
