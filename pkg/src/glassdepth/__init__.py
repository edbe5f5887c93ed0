"""Transparent-object depth completion: a normal-guided global depth solve
followed by latent DDIM diffusion conditioned on RGB and the refined depth."""

__version__ = "0.1.0"
