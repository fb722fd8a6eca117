"""Contrastive pretraining of 3D volumes against generated clinical prompts."""

__version__ = "1.0.0"
