"""Loss balancing for Sobolev and physics-informed network training."""

__version__ = "0.1.0"
