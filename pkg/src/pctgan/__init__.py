"""Timing- and physics-conditioned GAN for forging shape sequences, built on numpy."""

__version__ = "0.1.0"
