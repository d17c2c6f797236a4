"""Exception hierarchy shared by every pipeline stage."""


class GConvError(Exception):
    """Base class for all errors raised by this package."""


class InvalidGeometryError(GConvError):
    pass


class InvalidGroupingError(GConvError):
    pass


class UnsupportedLayerError(GConvError):
    pass


class DependencyError(GConvError):
    pass


class ShapeError(GConvError):
    pass


class RegistryError(GConvError):
    pass


class BindingError(GConvError):
    pass


class ParseError(GConvError):
    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class EncodingOverflowError(GConvError):
    pass


class StageError(GConvError):
    """Wraps an error with the name of the pipeline stage that raised it."""

    def __init__(self, stage, error):
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error
