"""Paper-style figures from dicsim output CSVs."""

__version__ = "0.1.0"
