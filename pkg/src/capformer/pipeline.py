"""End-to-end glue: profiles -> features -> normalized windows -> model -> forecast."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .datapipe import (DEFAULT_LAYOUT, ChannelLayout, CycleProfile, FeatureVector, NormStats,
                       WindowSample, downsample_cells, normalize, training_corpus)
from .errors import ConfigError
from .forecast import ForecastReport, evaluate, naive_forecast
from .model import ModelConfig, ModelParams
from .training import TrainConfig, TrainReport, train


@dataclass
class PreparedData:
    features: dict[str, list[FeatureVector]]
    normalized: dict[str, list[FeatureVector]]
    stats: NormStats


def prepare(cells: Mapping[str, Sequence[CycleProfile]], target_cell: str, holdout_last: int,
            layout: ChannelLayout = DEFAULT_LAYOUT) -> PreparedData:
    """Downsample every cell and normalize with statistics of the training cycles only.

    Training cycles are every cycle except the target cell's final
    ``holdout_last`` cycles.
    """
    if target_cell not in cells:
        raise ConfigError(f"target cell {target_cell!r} not found; available: {sorted(cells)}")
    features = downsample_cells(cells, layout)
    pool = []
    for cell, seq in features.items():
        pool.extend(seq[:len(seq) - holdout_last] if cell == target_cell else seq)
    _, stats = normalize(pool, layout=layout)
    normalized = {cell: normalize(seq, stats)[0] for cell, seq in features.items()}
    return PreparedData(features, normalized, stats)


def build_corpus(data: PreparedData, target_cell: str, holdout_last: int, window: int,
                 sigmas: Sequence[float], seed: int) -> tuple[list[WindowSample], list[WindowSample]]:
    return training_corpus(data.normalized, window, holdout_last, target_cell, sigmas, seed)


def fit(data: PreparedData, target_cell: str, holdout_last: int, model_cfg: ModelConfig,
        train_cfg: TrainConfig, sigmas: Sequence[float], seed: int,
        checkpoint_path=None) -> tuple[ModelParams, TrainReport, int]:
    windows, _ = build_corpus(data, target_cell, holdout_last, model_cfg.window, sigmas, seed)
    params, report = train(windows, model_cfg, train_cfg, checkpoint_path=checkpoint_path,
                           norm_stats=data.stats)
    return params, report, len(windows)


def assess(params: ModelParams, data: PreparedData, target_cell: str,
           holdout_last: int) -> tuple[ForecastReport, ForecastReport]:
    """Model forecast report and the last-value-carried-forward baseline report."""
    model = evaluate(params, data.features, target_cell, data.stats, holdout_last)
    naive = naive_forecast(data.features, target_cell, holdout_last, params.config.window)
    return model, naive
