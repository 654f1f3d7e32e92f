"""Deterministic in-silico lesion-trial engine for volumetric lung imaging."""

from trialforge.errors import TrialForgeError

__version__ = "0.1.0"

__all__ = ["TrialForgeError", "__version__"]
