"""Desk-scale pose-conditioned diffusion video generation.

A tiny conditional denoising-diffusion model bound to synthetic stick-figure
identities, plus the inference machinery for long sequences: all-frame
attention inside overlapping windows, batch-overlapped temporal denoising,
classifier-free guidance, and inpainting-based face enhancement, with an
evaluation harness (structure error, flicker, Fréchet feature distance,
PSNR).
"""

__version__ = "0.1.0"
