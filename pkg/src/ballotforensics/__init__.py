"""Statistical forensics for ballot-box level election results."""

__version__ = "0.1.0"
