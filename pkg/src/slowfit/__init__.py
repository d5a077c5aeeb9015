"""Parameter estimation for fast-slow stochastic systems driven by alpha-stable noise."""

__version__ = "0.1.0"
