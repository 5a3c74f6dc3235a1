"""Event-by-event simulation and coincidence analysis of two-station photon polarization experiments."""

__version__ = "0.1.0"
