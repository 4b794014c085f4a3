"""netagg: merge and selectively forget convolutional networks by
parameter arithmetic, after jointly training them for aggregability."""

from .aggregation import MEAN, SUM, AggregationOp, aggregate, aggregation_loss, compose_model, subtract
from .data import LabeledDataset, synthetic_pair, union
from .errors import ConfigError, DataError, FormatError, NetAggError, NumericsError, ShapeError
from .models import Model, ModelSpec, PRESETS, build_bundle, forward, predict
from .params import ParamSet
from .training import MetricsRecord, TrainConfig, TrainedBundle, baseline_train, evaluate, joint_train

__version__ = "0.1.0"

__all__ = [
    "AggregationOp",
    "SUM",
    "MEAN",
    "aggregate",
    "subtract",
    "aggregation_loss",
    "compose_model",
    "LabeledDataset",
    "synthetic_pair",
    "union",
    "NetAggError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericsError",
    "Model",
    "ModelSpec",
    "PRESETS",
    "build_bundle",
    "forward",
    "predict",
    "ParamSet",
    "TrainConfig",
    "TrainedBundle",
    "MetricsRecord",
    "joint_train",
    "baseline_train",
    "evaluate",
]
