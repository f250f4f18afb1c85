"""Zone-aware egocentric action recognition on pre-extracted features."""

__version__ = "0.1.0"
