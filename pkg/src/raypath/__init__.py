"""Point-to-point specular ray tracing with a learned path-candidate sampler."""

__version__ = "0.1.0"
