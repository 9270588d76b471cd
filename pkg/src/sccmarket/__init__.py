"""Short-circuit current as a tradeable ancillary service."""

__version__ = "0.1.0"
