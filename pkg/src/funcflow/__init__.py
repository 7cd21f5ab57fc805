"""Function-space flow matching with mini-batch optimal-transport coupling."""

__version__ = "0.1.0"
