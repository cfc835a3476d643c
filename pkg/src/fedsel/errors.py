"""Exception hierarchy shared by every fedsel module."""


class FedselError(Exception):
    """Base class for all errors raised by fedsel."""


class DimensionError(FedselError, ValueError):
    pass


class NumericError(FedselError, ArithmeticError):
    pass


class PartitionError(FedselError, ValueError):
    pass


class AggregationError(FedselError, ValueError):
    pass


class ProtocolError(FedselError, RuntimeError):
    """A selector or round violated the round protocol."""


class SkipError(FedselError, ValueError):
    """Raised when a client cannot train (e.g. empty shard)."""


class FormatError(FedselError, ValueError):
    """Malformed dataset file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class IsolatedNodeError(FedselError, ValueError):
    def __init__(self, node: int):
        self.node = node
        super().__init__(f"node {node} has zero degree")


class DegenerateVoteError(FedselError, ValueError):
    pass


class ConfigError(FedselError, ValueError):
    pass


class MetricsError(FedselError, ValueError):
    pass
