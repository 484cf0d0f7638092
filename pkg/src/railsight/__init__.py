"""Track-aware railway signal detection on camera frames."""

__version__ = "0.1.0"
