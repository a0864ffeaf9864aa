"""TabAConvBERT for tabular time series."""

from ._core import (
    ConfigError,
    ContractError,
    DimensionError,
    Error,
    IntegrityError,
    InvalidValueError,
    NumericError,
    SchemaError,
    TensorIndexError,
    UnsupportedVersionError,
    bayes_f1_bound,
    calendar_parts,
    evaluate,
    finetune,
    gen,
    gradcheck,
    pretrain,
    sample_mask,
    window_count,
)

__version__ = "0.1.0"
