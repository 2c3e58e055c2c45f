"""Dense 3D visual grounding on synthetic point-cloud scenes."""

__version__ = "0.1.0"
