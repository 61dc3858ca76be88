"""Shared error taxonomy.

Every failure the package raises deliberately goes through one of these
classes so the CLI can map it to an exit code and a stable stderr prefix.
"""


class DiffcfError(Exception):
    """Base class for all deliberate failures. ``category`` feeds the CLI's
    machine-parsable stderr line."""

    category = "error"


class ContractError(DiffcfError):
    """An argument or configuration violates a documented precondition."""

    category = "contract"


class ShapeError(ContractError):
    """Operands passed to a tensor op have incompatible shapes."""

    category = "shape"


class NumericError(DiffcfError):
    """A computation produced NaN/Inf or hit a guarded singularity."""

    category = "numeric"


class ParseError(DiffcfError):
    """An input file is malformed. Carries a 1-based line number when known."""

    category = "parse"

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyInputError(ParseError):
    """An input file contained no usable records."""

    category = "empty-input"


class FormatError(DiffcfError):
    """A binary artifact has a bad magic, version, or structure."""

    category = "format"
