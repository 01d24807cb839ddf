"""Exception types shared across the package."""


class SCDError(Exception):
    pass


class ParameterError(SCDError, ValueError):
    """Invalid argument value or inconsistent dimensions."""


class DataQualityError(SCDError):
    """Input data unusable for fitting (e.g. a diverged trajectory)."""


class StepSizeError(SCDError, FloatingPointError):
    """Line search could not produce a finite objective."""


class FormatError(SCDError, ValueError):
    """Malformed JSON/CSV artifact. Carries the offending location."""

    def __init__(self, message, path=None, line=None, field=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.field = field
