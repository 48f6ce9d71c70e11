"""Sequential deep-image-prior tomography with a fractional inter-slice prior."""
__version__ = "0.1.0"
