"""Task-adaptive low-rank prompt tuning on a small frozen decoder transformer."""

__version__ = "0.1.0"
