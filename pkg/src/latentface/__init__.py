"""Self-supervised face representations from a symmetric 3D autoencoder and a latent diffusion identity model."""

__version__ = "0.1.0"
