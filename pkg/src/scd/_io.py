import json
from pathlib import Path

from .errors import FormatError


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(str(exc), path=path) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, path=path, line=exc.lineno) from None
    if not isinstance(obj, dict):
        raise FormatError("top-level value must be an object", path=path)
    return obj


def require(d, key, kind, path=None):
    if key not in d:
        raise FormatError("missing", path=path, field=key)
    value = d[key]
    if kind is int and isinstance(value, bool):
        raise FormatError("expected int", path=path, field=key)
    if not isinstance(value, kind):
        raise FormatError(f"expected {kind.__name__}", path=path, field=key)
    return value
