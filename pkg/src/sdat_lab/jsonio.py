"""JSON writing with floats at 17 significant digits, plus durable file writes."""
from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np


def _enc(obj, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError("non-finite float cannot be written as JSON")
        s = format(x, ".17g")
        return s if any(c in s for c in ".en") else s + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) for v in obj):
            return "[" + ", ".join(_enc(v, 0, 0) for v in obj) + "]"
        return "[" + ",".join(pad + _enc(v, indent, level + 1) for v in obj) + end + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = (pad + json.dumps(str(k)) + ": " + _enc(v, indent, level + 1) for k, v in obj.items())
        return "{" + ",".join(items) + end + "}"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj, indent: int = 1) -> str:
    return _enc(obj, indent, 0)


def write_durable(path, text: str) -> None:
    """Write via a temporary file, fsync, then rename into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
