"""Data-driven stochastic optimal control with online parameter estimation."""
import warnings

from numba.core.errors import NumbaExperimentalFeatureWarning

# Passing compiled model callbacks into kernels is flagged experimental by numba.
warnings.filterwarnings("ignore", category=NumbaExperimentalFeatureWarning)

__version__ = "0.1.0"
