"""Artifact/semantic feature fusion: optimal-transport transfer, cross-attention
transfer, attention-dilution diagnostics and a synthetic benchmark."""

__version__ = "0.1.0"
