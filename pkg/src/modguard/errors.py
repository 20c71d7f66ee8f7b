"""Exception hierarchy shared across modguard modules."""


class ModguardError(Exception):
    """Base class for every error raised by this package."""


class DecodeError(ModguardError, ValueError):
    pass


class EmptyCrop(ModguardError, ValueError):
    pass


class ConfigError(ModguardError, ValueError):
    pass


class LengthMismatch(ModguardError, ValueError):
    pass


class ShapeMismatch(ModguardError, ValueError):
    pass


class NoAnchorNear(ModguardError, ValueError):
    pass


class MissingRecording(ModguardError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ConflictError(ModguardError):
    pass


class BackendError(ModguardError):
    """A model backend failed; ``stage`` names the pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class UnknownPath(ModguardError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UndefinedMetric(ModguardError, ZeroDivisionError):
    pass


class NoPositives(ModguardError, ValueError):
    pass


class EmptyManifest(ModguardError, ValueError):
    pass
