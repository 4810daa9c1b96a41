"""Distilling a frozen vision-transformer embedding model into a small conv student for edge labeling."""

from .config import Config, ConfigError

__all__ = ["Config", "ConfigError"]
__version__ = "0.1.0"
