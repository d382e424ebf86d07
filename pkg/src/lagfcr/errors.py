"""Exception types shared across the package.

The CLI maps these onto stable exit codes, so library code raises the most
specific class available.
"""


class LagFCRError(Exception):
    code = "error"
    exit_code = 1


class DimensionError(LagFCRError, ValueError):
    code = "dimension"
    exit_code = 2


class GeometryError(LagFCRError, ValueError):
    code = "geometry"
    exit_code = 2


class InputError(LagFCRError, ValueError):
    """Bad or missing input files, with optional file/row context."""

    code = "input"
    exit_code = 2

    def __init__(self, message, path=None, row=None, details=None):
        self.path = path
        self.row = row
        self.details = details or {}
        where = ""
        if path is not None:
            where = f"{path}"
            if row is not None:
                where += f":{row}"
            where += ": "
        super().__init__(where + message)


class ConfigError(LagFCRError, ValueError):
    code = "config"
    exit_code = 3

    def __init__(self, message, field=None):
        self.field = field
        prefix = f"{field}: " if field else ""
        super().__init__(prefix + message)


class SamplerError(LagFCRError, RuntimeError):
    code = "sampler"
    exit_code = 4


class CheckpointError(LagFCRError, ValueError):
    code = "checkpoint"
    exit_code = 2
