"""graspil: imitation-learning stack for autonomous prosthetic-hand
grasp/release against a deterministic desk-scale simulator."""

__version__ = "0.1.0"
