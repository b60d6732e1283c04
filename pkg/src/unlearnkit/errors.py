"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid configuration value or unparseable config file."""


class ConsistencyError(ValueError):
    """A cached trace does not belong to the model it is used with."""


class NumericError(RuntimeError):
    """A computation produced or received non-finite values."""


class DataFormatError(RuntimeError):
    """A serialized model or dataset file is corrupt or has the wrong version."""
