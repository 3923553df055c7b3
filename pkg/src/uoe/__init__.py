"""Union-of-Experts transformer on a small numpy autograd core."""

__version__ = "0.1.0"
