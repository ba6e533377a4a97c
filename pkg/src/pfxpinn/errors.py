"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PfxError(Exception):
    exit_code = 1
    code = "ERROR"


class ConfigError(PfxError):
    """Invalid configuration or contract violation in user-supplied settings."""

    exit_code = 1
    code = "VALIDATION_ERROR"

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


class GeometryError(PfxError):
    exit_code = 1
    code = "GEOMETRY_ERROR"


class InputShapeError(PfxError, ValueError):
    exit_code = 1
    code = "INPUT_SHAPE_ERROR"


class NumericalFailure(PfxError, FloatingPointError):
    """A loss, gradient or field became non-finite."""

    exit_code = 3
    code = "NUMERICAL_FAILURE"

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class OutputError(PfxError, OSError):
    exit_code = 2
    code = "IO_ERROR"

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
