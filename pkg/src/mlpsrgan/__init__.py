"""Slice-direction super-resolution of MRI volumes with an MLP-Mixer GAN."""

__version__ = "0.1.0"
