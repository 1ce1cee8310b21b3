"""Tiered checkpointing engine with a deterministic cluster simulator."""
