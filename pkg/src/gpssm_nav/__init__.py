"""Indoor navigation by fusing WiFi RSS and pedestrian dead reckoning with a GPSSM."""

__version__ = "0.1.0"
