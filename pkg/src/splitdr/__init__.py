"""Split-Douglas-Rachford and Split-ADMM operator splitting."""
__version__ = "0.1.0"
