"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid scenario, channel, or run configuration."""


class IntegrityError(RuntimeError):
    """Internal state violated an invariant (single-copy rule, ACK-set
    consistency, transfer of a packet not held by its sender).  A run that
    raises this is aborted; it indicates a bug, not bad input."""


class TruncationWarning(UserWarning):
    """A truncated infinite series still carried non-negligible tail mass."""
