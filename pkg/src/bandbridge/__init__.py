"""Multispectral patch harmonization: bicubic baseline, UNet and ESRT-lite on a numpy autograd core."""

__version__ = "0.1.0"
