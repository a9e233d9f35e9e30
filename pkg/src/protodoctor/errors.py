"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric failures exit 4.
"""


class ProtoDoctorError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(ProtoDoctorError, ValueError):
    exit_code = 2
    category = "config"


class SchemaError(ProtoDoctorError, ValueError):
    """A record, file or schema disagrees with the expected layout."""

    exit_code = 3
    category = "data"


class ShapeError(SchemaError):
    """Tensor widths or lengths do not match the parameters they meet."""


class ContractError(ProtoDoctorError, ValueError):
    """An operation was called outside its precondition."""

    exit_code = 3
    category = "data"


class NumericError(ProtoDoctorError, FloatingPointError):
    """A non-finite value appeared; ``stage`` names where."""

    exit_code = 4
    category = "numeric"

    def __init__(self, stage: str, message: str = ""):
        self.stage = stage
        super().__init__(f"non-finite value in {stage}" + (f": {message}" if message else ""))
