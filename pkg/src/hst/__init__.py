"""Hierarchical spectrogram transformer for cough and breath screening."""

from .config import RunConfig, load_run_config
from .dsp import AudioClip, DspConfig, compute_spectrogram, load_audio
from .model import HstConfig, HstModel, count_params
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = ["AudioClip", "DspConfig", "HstConfig", "HstModel", "RunConfig", "TrainConfig",
           "compute_spectrogram", "count_params", "fit", "load_audio", "load_run_config"]
