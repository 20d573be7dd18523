"""Safety controller synthesis and certified runtime filtering for a disturbed car."""

__version__ = "0.1.0"
