"""Tactile elastomer simulation with a coarse MPM solver and a learned high-resolution decoder."""
from .config import ConfigError, IndenterConfig, MaterialParams, SimConfig

__version__ = "0.1.0"
