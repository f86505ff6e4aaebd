"""Multi-atlas segmentation with joint label fusion."""

__version__ = "0.1.0"
