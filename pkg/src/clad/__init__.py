"""Log anomaly detection on compressed byte streams."""

__version__ = "0.1.0"
