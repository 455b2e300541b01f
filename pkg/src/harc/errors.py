"""Exception hierarchy shared by every harc module.

The CLI maps each family to a fixed exit code, so library code should raise
the most specific class available rather than a bare ``ValueError``.
"""

from __future__ import annotations


class HarcError(Exception):
    """Base class for all errors raised by harc."""

    kind = "error"


class ValidationError(HarcError, ValueError):
    kind = "validation"


class ParseError(ValidationError):
    """A malformed input line. ``line`` is 1-based."""

    kind = "parse"

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class FormatError(ParseError):
    kind = "format"


class UnknownIdError(HarcError, KeyError):
    kind = "lookup"

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else "unknown id"


class ShapeError(HarcError, ValueError):
    """Raised by a tensor op when operand shapes are incompatible."""

    kind = "shape"

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        text = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            text += f" ({detail})"
        super().__init__(text)


class CorruptionError(HarcError):
    kind = "corrupt"


class UnsupportedVersionError(CorruptionError):
    kind = "version"


class NumericError(HarcError, ArithmeticError):
    kind = "numeric"


class UsageError(HarcError):
    kind = "usage"
