"""Spin-qubit noise spectroscopy: CP dephasing simulation, MLP regression of
the noise spectral density, and a harmonics-spectroscopy baseline."""

__version__ = "0.1.0"

from .dataset import Dataset, GridSpec, ParamRanges, Sample, build_dataset
from .mlp import MlpConfig, MlpRegressor, TUNED_CONFIGS, fit_model, predict_params
from .physics import (CoherenceCurve, NsdParams, PulseSequence, coherence,
                      decoherence_exponent, filter_function,
                      modulation_function, nsd_value, survival_probability)

__all__ = [
    "__version__",
    "CoherenceCurve", "Dataset", "GridSpec", "MlpConfig", "MlpRegressor",
    "NsdParams", "ParamRanges", "PulseSequence", "Sample", "TUNED_CONFIGS",
    "build_dataset", "coherence", "decoherence_exponent", "filter_function",
    "fit_model", "modulation_function", "nsd_value", "predict_params",
    "survival_probability",
]
