"""Few-shot segmentation with a decoupled self-attention pyramid and correlation-map distillation."""

__version__ = "0.1.0"
