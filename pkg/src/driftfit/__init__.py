"""driftfit: force-field inference for diffusion processes from snapshot data."""

__version__ = "0.1.0"
