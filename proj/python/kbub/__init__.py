"""Bubble simulator, Koopman autoencoder and DMD bindings."""

from ._kbub import (
    ConfigError,
    DataError,
    DomainError,
    NumericalError,
    ShapeError,
    dmd_predict,
    encode_pgm,
    fit_dmd,
    generate_trajectory,
    gray_level,
    hydrostatic_background,
    main,
    read_dataset,
    shape_trace,
    transform_variables,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "NumericalError",
    "ShapeError",
    "dmd_predict",
    "encode_pgm",
    "fit_dmd",
    "generate_trajectory",
    "gray_level",
    "hydrostatic_background",
    "main",
    "read_dataset",
    "shape_trace",
    "transform_variables",
]
