"""Jensen-surrogate incremental reconstruction for X-ray transmission CT."""

__version__ = "0.1.0"
