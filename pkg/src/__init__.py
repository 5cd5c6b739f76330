"""Count echo state network forecasting package."""
__version__ = "0.1.0"
