"""Contrastive likelihood rewards, GRPO and synthetic retrieval-QA tasks at toy scale."""

__version__ = "0.1.0"
