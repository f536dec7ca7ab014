"""Fine-grained visual-semantic multiple-instance learning on synthetic slides."""

__version__ = "0.1.0"
