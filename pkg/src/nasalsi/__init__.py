"""Speech inversion of velopharyngeal nasalance from acoustics."""

__version__ = "0.1.0"
