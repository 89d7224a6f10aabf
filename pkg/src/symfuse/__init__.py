"""Fail-safe two-branch color + LiDAR segmentation with class-incremental learning."""

__version__ = "0.1.0"
