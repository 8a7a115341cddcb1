"""Few-shot spoken intent classification with representation-based meta-learning."""

__version__ = "0.1.0"
