"""CPU-only LIDAR segment matching and localization toolkit."""

__version__ = "0.1.0"
