"""Desk-scale test-time adaptation for a tiny contrastive dual encoder."""

__version__ = "0.1.0"
