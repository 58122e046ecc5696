"""M2Net highlight detection and removal."""

__version__ = "1.0.0"
