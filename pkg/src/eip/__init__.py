"""Ephemeral, self-certified IP identifiers with receiver-generated puzzles."""

__version__ = "0.1.0"
