"""Self-attention sequential recommenders with trainable attention-weight refinement."""

from .backbone import ModelConfig, SeqRecModel
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SequenceDataset, SplitDataset, build_sequences, five_core_filter,
                   generate_synthetic, ingest_csv, leave_one_out_split, load_dataset, save_dataset)
from .errors import ConfigError, ContractError, DataError, DimensionError, NonFiniteError, RefineRecError
from .evaluation import MetricsReport, PopularityModel, evaluate, metrics_at
from .export import export_attention
from .refine import MECHANISMS, parameter_count
from .tensor import Parameter, Tensor, no_grad
from .train import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "DimensionError", "MECHANISMS", "MetricsReport",
    "ModelConfig", "NonFiniteError", "Parameter", "PopularityModel", "RefineRecError",
    "SeqRecModel", "SequenceDataset", "SplitDataset", "Tensor", "TrainConfig", "build_sequences",
    "evaluate", "export_attention", "five_core_filter", "fit", "generate_synthetic", "ingest_csv",
    "leave_one_out_split", "load_checkpoint", "load_dataset", "metrics_at", "no_grad",
    "parameter_count", "save_checkpoint", "save_dataset",
]
