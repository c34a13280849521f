"""Two-stage sparse-grid batch sampling plus expected-improvement search, with fast sparse kernel inverses."""

__version__ = "0.1.0"
