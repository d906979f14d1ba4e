"""Self-supervised grasp-and-throw learning with residual ballistics, at desk scale."""

__version__ = "0.1.0"
