"""Progressive vision-language adapters on a numpy autograd core."""

__version__ = "0.1.0"
