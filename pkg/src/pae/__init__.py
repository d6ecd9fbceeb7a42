"""Prompt-Agnostic Evolution for deep visual prompt tuning on a tiny frozen ViT."""

__version__ = "0.1.0"
