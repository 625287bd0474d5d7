"""Two-stage contrastive vulnerability detection for smart-contract source code."""

__version__ = "0.1.0"
