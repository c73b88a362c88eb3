"""Exception hierarchy. Every error carries a category used by the CLI run manifest."""


class LonglabError(Exception):
    category = "internal"


class ConfigError(LonglabError):
    category = "config"


class DataError(LonglabError):
    category = "data"


class TokenizerError(LonglabError):
    category = "tokenizer"


class ShapeError(LonglabError):
    category = "shape"


class PatternError(LonglabError):
    category = "attention"


class CheckpointError(LonglabError):
    category = "checkpoint"


class TrainingError(LonglabError):
    category = "training"
