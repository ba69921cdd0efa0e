"""Learn a human-object spatial relation prior and refine 3D interactions with it."""

__version__ = "1.0.0"
