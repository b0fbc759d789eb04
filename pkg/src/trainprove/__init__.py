"""Black-box verification of whether a classifier was trained on data from a
specific (simulated) generative source."""

__version__ = "0.1.0"
