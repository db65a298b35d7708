"""Desk-scale diffusion segmentation with anchor conditioning and
frequency-domain cross-attention, plus STAPLE ensemble fusion and
uncertainty metrics."""

__version__ = "0.1.0"
