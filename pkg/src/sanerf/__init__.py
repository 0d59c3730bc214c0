"""Joint radiance-field and camera-pose optimisation from unposed images."""

__version__ = "0.1.0"
