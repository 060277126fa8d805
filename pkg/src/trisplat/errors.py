"""Exception hierarchy shared across the package."""


class TrisplatError(Exception):
    pass


class InvalidArgument(TrisplatError, ValueError):
    pass


class InvalidState(TrisplatError, RuntimeError):
    pass


class PlyParseError(TrisplatError, ValueError):
    pass


class IngestionError(TrisplatError, ValueError):
    pass


class ConfigError(TrisplatError, ValueError):
    pass


class ManifestError(TrisplatError, ValueError):
    pass


class PriorError(TrisplatError, RuntimeError):
    """Transport or protocol failure talking to a diffusion prior.

    ``retriable`` tells the trainer whether skipping the step and carrying on
    is reasonable.
    """

    def __init__(self, message: str, retriable: bool = True):
        super().__init__(message)
        self.retriable = retriable


class PriorProtocolError(PriorError):
    pass
