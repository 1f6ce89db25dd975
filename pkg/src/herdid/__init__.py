"""Self-supervised visual re-identification of individually patterned animals."""

__version__ = "0.1.0"
