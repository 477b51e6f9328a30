"""Continuous-time autoencoders for time series imputation."""
from .controlpath import ControlPath, TimeSeriesSample, build_control_path
from .cta import Batch, Chain, ModelConfig, chain_forward, impute, impute_samples
from .data import Dataset, MissingSpec, SyntheticConfig, load_csv, make_synthetic
from .evaluation import mae, rmse, run_benchmark
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ControlPath", "TimeSeriesSample", "build_control_path", "Batch", "Chain",
    "ModelConfig", "chain_forward", "impute", "impute_samples", "Dataset",
    "MissingSpec", "SyntheticConfig", "load_csv", "make_synthetic", "mae", "rmse",
    "run_benchmark", "TrainConfig", "train",
]
