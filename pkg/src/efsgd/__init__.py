"""Two-way compressed distributed SGD with error feedback, plus baselines and checks."""

__version__ = "0.1.0"
