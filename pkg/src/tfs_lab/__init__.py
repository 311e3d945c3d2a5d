"""TAPT, finetuning and self-training regimes on a from-scratch transformer encoder."""

__version__ = "0.1.0"
