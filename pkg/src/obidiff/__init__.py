"""Toolkit for structure-aligned oracle-bone-inscription image pairs.

Contains the synthetic aligned-pair dataset pipeline with IoU quality
gates, a glyph/style conditioned pixel-space diffusion generator, a
supervised denoising baseline, the evaluation harness (pair metrics,
Frechet feature proxy, recognition classifier, augmentation study,
human-study scorer), and a CLI with an HTTP server for the study UI.
"""

__version__ = "0.1.0"
