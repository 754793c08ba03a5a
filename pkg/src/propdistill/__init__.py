"""Fine-grained propaganda identification guided by discourse structures."""

__version__ = "0.1.0"
