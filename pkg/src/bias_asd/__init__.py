"""Audio, face and body active speaker detection with SE-gate interpretability."""

__version__ = "0.1.0"
