"""Asynchronous speaker anonymization with a learned spectral perturbation generator."""

from .signal import FbankConfig, StftConfig, Waveform

__version__ = "0.1.0"

__all__ = ["FbankConfig", "StftConfig", "Waveform", "__version__"]
