"""Denoising-score guidance service speaking wire protocol "dds/1"."""

__version__ = "0.1.0"
