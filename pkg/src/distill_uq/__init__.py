"""Self-distillation for uncertainty quantification of graph classifiers."""

__version__ = "0.1.0"
