"""Exception hierarchy shared by all modules."""


class CollabError(Exception):
    """Base class; ``kind`` is the short machine-readable tag used by the CLI."""

    kind = "error"


class ShapeError(CollabError, ValueError):
    kind = "shape"


class DomainError(CollabError, ValueError):
    kind = "domain"


class ConfigError(CollabError, ValueError):
    kind = "config"


class StateError(CollabError, RuntimeError):
    kind = "state"


class TrainingError(CollabError, RuntimeError):
    kind = "training"


class SchemaError(CollabError, ValueError):
    kind = "schema"
