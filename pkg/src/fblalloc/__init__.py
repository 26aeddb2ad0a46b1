"""Power-minimal blocklength allocation for wireless control loops."""

__version__ = "0.1.0"
