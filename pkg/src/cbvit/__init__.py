"""Vision Transformer lab for context broadcasting and attention-density diagnostics."""

__version__ = "0.1.0"
