"""Exception hierarchy shared by the engine and the simulator."""


class TierCkptError(Exception):
    """Base class."""


class ConfigError(TierCkptError, ValueError):
    """Invalid configuration; the message starts with the offending field path."""


class ProtocolError(TierCkptError):
    """An operation was invoked out of order or with mismatched inputs."""


class CorruptionError(TierCkptError):
    """A payload or stored object failed validation."""


class IntegrityError(CorruptionError):
    """Tier-3 markers disagree with the files actually present."""


class UnavailableError(TierCkptError):
    """The tier's failure domain is down."""


class NotFoundError(TierCkptError, KeyError):
    """The object is not present in the requested tier."""


class UnrecoverableError(TierCkptError):
    """No base version is obtainable by every rank."""
