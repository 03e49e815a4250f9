"""Two-stage skeleton action recognition: GCN per short sequence, Transformer across sequences."""

__version__ = "0.1.0"
