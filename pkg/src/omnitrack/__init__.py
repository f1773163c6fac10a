"""Dense long-range point tracking by test-time optimization of a quasi-3D motion representation."""

__version__ = "0.1.0"
