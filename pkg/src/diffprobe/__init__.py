"""diffprobe: frozen diffusion backbones as multi-scale feature extractors.

A small, CPU-friendly framework that pretrains a toy latent diffusion
denoiser, taps its intermediate activations along a deterministic inversion
path, fuses them (global weights, pixel-wise gating, or a sparse
mixture-of-experts), and trains lightweight classification/segmentation
probes on top.
"""

__version__ = "0.1.0"

from . import backend  # noqa: F401
