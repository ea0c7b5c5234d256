"""Security-constrained AC optimal power flow toolkit."""

__version__ = "0.1.0"
