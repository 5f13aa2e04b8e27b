"""Multitask spatial reasoning: synthetic scenes, a small vision-language transformer, relation-aware ensembling."""

__version__ = "0.1.0"
