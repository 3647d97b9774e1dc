# core/errors.py


class StyfError(Exception):
    """
    Base class for every error raised by the core package.
    """


class ContractError(StyfError, ValueError):
    """
    A precondition of an operation was violated (shapes, lengths, missing inputs).
    """


class DimensionError(ContractError):
    """
    Tensor or feature dimensions do not agree.
    """


class ConfigurationError(StyfError, ValueError):
    """
    Corpus, style spec, loss weights or run configuration are unusable.
    """


class UsageError(StyfError, RuntimeError):
    """
    An API was called in an order it does not support (e.g. a second backward).
    """


class IntegrityError(StyfError):
    """
    A checkpoint failed its magic, version, layout or CRC checks.
    """


class TrainingDivergedError(StyfError, RuntimeError):
    """
    Training produced non-finite losses or never left chance level.
    """


class MissingArtifactError(StyfError, FileNotFoundError):
    """
    A phase depends on a checkpoint that has not been produced yet.
    """
