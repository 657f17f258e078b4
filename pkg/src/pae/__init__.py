"""Device-server collaborative side-tuning."""

__version__ = "0.1.0"
