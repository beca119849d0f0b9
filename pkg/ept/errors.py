class EptError(Exception):
    """Base error. `module` names the part of the engine that raised it."""

    module = "ept"

    def __init__(self, message, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class FormatError(EptError):
    pass


class ValidationError(EptError):
    pass


class ProtocolError(EptError):
    pass


class NumericError(EptError):
    pass


class PoolStateError(EptError):
    pass


class ConfigError(EptError):
    module = "config"


class EmbeddingIOError(EptError, OSError):
    module = "embedding_store"
