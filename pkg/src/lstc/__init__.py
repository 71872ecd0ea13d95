"""Long-short-term context heads for atomic action detection, in plain numpy."""

__version__ = "0.1.0"
