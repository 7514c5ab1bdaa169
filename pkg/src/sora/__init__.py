"""Symptom-to-organ reasoning on synthetic CT volumes and symptom embeddings."""

__version__ = "0.1.0"
