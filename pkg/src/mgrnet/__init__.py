"""Modality-aware graph reasoning for multi-modal re-identification on synthetic features."""
from .core import (
    DIRECTIONS,
    MODALITIES,
    ConfigError,
    FormatError,
    MGRNetError,
    ModelConfig,
    ModelParams,
    NonFiniteError,
    PipelineOptions,
    Scenario,
    ShapeError,
    TokenMatrix,
    TruncatedFileError,
    init_params,
    load_params,
    save_params,
)
from .synth import DatasetSpec, FeatureBank, gen_bank, read_bank, split_bank, write_bank

__version__ = "0.1.0"

__all__ = [
    "DIRECTIONS",
    "MODALITIES",
    "ConfigError",
    "DatasetSpec",
    "FeatureBank",
    "FormatError",
    "MGRNetError",
    "ModelConfig",
    "ModelParams",
    "NonFiniteError",
    "PipelineOptions",
    "Scenario",
    "ShapeError",
    "TokenMatrix",
    "TruncatedFileError",
    "gen_bank",
    "init_params",
    "load_params",
    "read_bank",
    "save_params",
    "split_bank",
    "write_bank",
]
