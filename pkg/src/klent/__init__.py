"""Model-free self-play learning with KL and entropy regularized policy improvement."""
__version__ = "0.1.0"
