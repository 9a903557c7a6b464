"""Set-based state estimation over Paillier-encrypted data."""

__version__ = "0.1.0"
