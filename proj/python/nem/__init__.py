"""Neural Expectation Maximization (N-EM and RNN-EM)."""

from ._core import (
    ConfigError,
    DimensionError,
    FormatError,
    IoError,
    NumericError,
    UndefinedScoreError,
    ami,
    ami_from_gamma,
    config,
    e_step,
    evaluate,
    generate,
    log_likelihood,
    read_dataset,
    render,
    train,
    write_dataset,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "FormatError",
    "IoError",
    "NumericError",
    "UndefinedScoreError",
    "ami",
    "ami_from_gamma",
    "config",
    "e_step",
    "evaluate",
    "generate",
    "log_likelihood",
    "read_dataset",
    "render",
    "train",
    "write_dataset",
]
