"""M2D and M2D-X self-supervised audio pre-training: two-branch masked prediction of patch representations."""

__version__ = "0.1.0"
