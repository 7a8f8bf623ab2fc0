"""Text-to-SQL pipeline and benchmark harness for BIRD-format datasets."""

__version__ = "0.1.0"
