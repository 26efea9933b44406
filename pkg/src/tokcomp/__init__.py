"""Token-classification prompt compression with an inter-class similarity penalty."""

__version__ = "0.1.0"
