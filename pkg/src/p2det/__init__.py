"""Prompt-conditioned oriented detection of transmission towers in SAR-like imagery.

A numpy reverse-mode autodiff engine drives a small detector: Fourier-feature
point prompts, two-way attention fusion, shape-adaptive label assignment,
and GIoU/boundary-center/focal losses, plus rotated-box geometry, synthetic
scene generation, and AP/AR evaluation.
"""

__version__ = "0.1.0"
