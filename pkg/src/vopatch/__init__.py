"""Physical passive patch attacks on visual odometry, at desk scale."""

__version__ = "0.1.0"
