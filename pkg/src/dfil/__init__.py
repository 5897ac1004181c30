"""Domain-incremental real/fake detection: losses, replay selection and the training loop."""

__version__ = "0.1.0"
