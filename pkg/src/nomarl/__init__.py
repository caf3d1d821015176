"""Uplink MC-NOMA scheduling workbench: simulator, baselines and an
actor-critic scheduler driven by buffer state information."""

__version__ = "0.1.0"
