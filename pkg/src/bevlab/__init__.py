"""Low-resolution BEV encoding with learnable high-resolution restoration."""

__version__ = "0.1.0"
