"""Flow mobility management simulator for multi-radio vehicular networks."""

__version__ = "0.1.0"
