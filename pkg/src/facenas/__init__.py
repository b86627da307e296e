"""Joint multi-stream architecture search for depression-score regression from facial attributes."""

__version__ = "0.1.0"
