"""Deterministic serialization helpers.

All numeric output uses 17 significant digits, which round-trips float64
exactly, so identical runs produce byte-identical files.
"""

import hashlib
import json

import numpy as np


def format_float(x: float) -> str:
    """17-significant-digit decimal form; parses back to the same float64."""
    return f"{float(x):.17g}"


def _json_token(obj) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not np.isfinite(obj):
            raise ValueError(f"non-finite value {obj!r} cannot be serialized")
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _json_token(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_json_token(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = sorted(obj.items())
        return "{" + ",".join(f"{_json_token(str(k))}:{_json_token(v)}" for k, v in items) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Compact JSON with sorted keys and 17-significant-digit floats."""
    return _json_token(obj)


def sha256_of(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def write_csv(path, header: list[str], rows) -> None:
    """Write rows of mixed ints/floats with deterministic formatting."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for v in row:
                if isinstance(v, (int, np.integer)):
                    cells.append(str(int(v)))
                elif isinstance(v, str):
                    cells.append(v)
                else:
                    cells.append(format_float(v))
            fh.write(",".join(cells) + "\n")
