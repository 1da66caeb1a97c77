"""Desk-scale conditional-variational dialogue generator with implicit-persona latents."""

__version__ = "0.1.0"
