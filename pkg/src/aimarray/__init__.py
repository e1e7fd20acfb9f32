"""Array layout design and evaluation for active incoherent millimetre-wave imaging."""

__version__ = "0.1.0"
