"""
Joint image and intrinsic latent diffusion.

A frozen text-to-image latent denoiser is extended with LoRA adapters that denoise a second latent (depth, surface
normals, segmentation and line drawings) in lockstep, the two domains exchanging information through a weighted
cross-domain self-attention.
"""

__version__ = "0.1.0dev"
