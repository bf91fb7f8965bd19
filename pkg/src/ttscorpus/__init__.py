"""Corpus curation pipeline and evaluation harness for TTS training data."""

__version__ = "0.1.0"
