"""Echo State Network validation and tuning laboratory."""

__version__ = "0.0.1"
