"""Desk-scale cross-modal adaptation study: encoder- vs decoder-only toy
transformers on 1-D PDE next-frame prediction, with FPT/ORCA adaptation and
two bidirectionality-simulation methods (Parallel Flipping, Sequence
Doubling)."""

__version__ = "0.1.0"
