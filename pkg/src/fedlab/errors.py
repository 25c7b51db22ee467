"""Exception hierarchy shared by all fedlab modules."""

from __future__ import annotations


class FedLabError(Exception):
    """Base class for all errors raised by fedlab."""


class ConfigError(FedLabError):
    """Invalid configuration: bad spec, bad hyperparameters, bad config file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ContractError(FedLabError, ValueError):
    """A caller violated an operation's precondition (shapes, layouts, empty inputs)."""


class FormatError(FedLabError):
    """A data file does not follow its binary layout."""

    def __init__(self, message: str, path: str | None = None, offset: int | None = None):
        self.path = path
        self.offset = offset
        parts = []
        if path is not None:
            parts.append(str(path))
        if offset is not None:
            parts.append(f"byte offset {offset}")
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DivergenceError(FedLabError):
    """Training produced a non-finite loss or parameter.

    ``last_finite`` holds the most recent parameters that were still finite.
    """

    def __init__(self, message: str, last_finite=None, step: int | None = None):
        self.last_finite = last_finite
        self.step = step
        super().__init__(message)


class RoundError(FedLabError):
    """A federated round failed; ``client_id`` names the offending client."""

    def __init__(self, message: str, round_index: int, client_id: int | None = None, partial=None):
        self.round_index = round_index
        self.client_id = client_id
        self.partial = partial
        super().__init__(message)
