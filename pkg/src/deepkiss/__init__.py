"""Deep kernel learning with structured kernel interpolation (KISS-GP)."""

__version__ = "0.1.0"
