"""Multi-horizon retail demand forecasting engine and evaluation harness.

The package splits into a differentiable numerics substrate (autodiff), data
ingest and windowing (data), the hybrid forecaster (model), the composite
objective (objectives), training (training), metrics and comparisons
(evaluation), reference baselines (baselines), and the batch CLI (cli).
"""

from .autodiff import Tape, Tensor, finite_difference_check
from .data import (
    SeriesPanel,
    SplitSpec,
    SynthParams,
    WindowSample,
    aggregate_daily,
    clean,
    ingest_csv,
    load_panel,
    make_splits,
    save_panel,
    synth_generate,
)
from .evaluation import ForecastSet, dm_test, make_metric_context, metric
from .model import HybridForecaster, ModelConfig, forecast, init_params
from .objectives import LossConfig, RlConfig
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "finite_difference_check",
    "SeriesPanel",
    "SplitSpec",
    "SynthParams",
    "WindowSample",
    "aggregate_daily",
    "clean",
    "ingest_csv",
    "load_panel",
    "make_splits",
    "save_panel",
    "synth_generate",
    "ForecastSet",
    "dm_test",
    "make_metric_context",
    "metric",
    "HybridForecaster",
    "ModelConfig",
    "forecast",
    "init_params",
    "LossConfig",
    "RlConfig",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
