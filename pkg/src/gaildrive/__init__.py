"""Imitation learning for waypoint-following driving: BC, Wasserstein GAIL and BC-augmented GAIL."""

__version__ = "0.1.0"
