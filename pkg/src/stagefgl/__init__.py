"""Deterministic simulator for anchor-calibrated multimodal federated graph learning."""

__version__ = "0.1.0"
