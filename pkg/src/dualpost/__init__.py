"""Post-training and evaluation toolkit for reasoning vision-language-action policies."""

__version__ = "0.1.0"
