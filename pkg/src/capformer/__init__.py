"""Battery capacity forecasting with an autoencoder + transformer encoder."""

from .datapipe import (ChannelLayout, CycleProfile, FeatureVector, NormStats, WindowSample,
                       augment, build_windows, downsample, normalize, parse_cycles,
                       training_corpus, write_cycles)
from .forecast import ForecastReport, evaluate, metrics, naive_forecast, rolling_forecast
from .model import ModelConfig, ModelParams, init_params, predict_next_capacity
from .synthetic import SynthConfig, generate_synthetic
from .training import TrainConfig, joint_loss, train

__all__ = [
    "ChannelLayout", "CycleProfile", "FeatureVector", "NormStats", "WindowSample", "augment",
    "build_windows", "downsample", "normalize", "parse_cycles", "training_corpus", "write_cycles",
    "ForecastReport", "evaluate", "metrics", "naive_forecast", "rolling_forecast",
    "ModelConfig", "ModelParams", "init_params", "predict_next_capacity",
    "SynthConfig", "generate_synthetic", "TrainConfig", "joint_loss", "train",
]

__version__ = "0.1.0"
