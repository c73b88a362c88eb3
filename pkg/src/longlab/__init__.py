"""longlab: a desk-scale laboratory for long-context sparse-attention encoders."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CheckpointError,
    ConfigError,
    DataError,
    LonglabError,
    PatternError,
    ShapeError,
    TokenizerError,
    TrainingError,
)
