"""Exception hierarchy shared by every fedcare module."""


class FedCareError(Exception):
    pass


class ConfigError(FedCareError, ValueError):
    """Invalid architecture, dataset or experiment configuration."""


class UsageError(FedCareError, RuntimeError):
    """An API was called out of contract (stale cache, layout mismatch...)."""


class DomainError(FedCareError, ValueError):
    """A formula was evaluated outside its domain."""


class DataFormatError(FedCareError, IOError):
    """A data file could not be parsed."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


class EmptyForgetSetError(FedCareError, ValueError):
    pass


class DivergenceError(FedCareError, FloatingPointError):
    def __init__(self, step, message="loss became non-finite"):
        self.step = step
        super().__init__(f"step {step}: {message}")


class CheckpointError(FedCareError, IOError):
    pass
