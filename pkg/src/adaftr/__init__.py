"""Joint CTR/CVR estimation with adaptive-temperature inter-task contrastive alignment."""

__version__ = "0.1.0"
