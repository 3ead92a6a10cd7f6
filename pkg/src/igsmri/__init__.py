"""Task-driven k-space line undersampling via iterative gradient sampling."""

__version__ = "0.1.0"
