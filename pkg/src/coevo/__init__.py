"""Co-evolution of body morphology and control for planar locomotors."""

__version__ = "0.1.0"
