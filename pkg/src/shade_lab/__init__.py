"""Style hallucinated dual consistency learning on a synthetic style-shift benchmark."""

__version__ = "0.1.0"
