"""JSON and CSV helpers with full-precision floats."""
from __future__ import annotations

import csv
import json
import math
import re

import numpy as np

FLOAT_FORMAT = "{:.17g}"
SIGNIFICANT_DIGITS = 17
_FLOAT_TAG = "@f17@"
_FLOAT_RE = re.compile('"' + _FLOAT_TAG + '([^"]*)"')


def format_float(x: float) -> str:
    """Finite float with exactly 17 significant digits (zero is ``0.0``)."""
    x = float(x)
    if x == 0.0:
        return "0.0"
    text = FLOAT_FORMAT.format(x)
    if "e" in text:
        return "{:.16e}".format(x)
    digits = len(text.lstrip("-").replace(".", "").lstrip("0"))
    if "." not in text:
        text += "."
    return text + "0" * (SIGNIFICANT_DIGITS - digits)


def _encode(obj):
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return _FLOAT_TAG + format_float(x)
    if isinstance(obj, (complex, np.complexfloating)):
        return [_encode(obj.real), _encode(obj.imag)]
    return obj


def dumps_json(obj) -> str:
    """Serialize with every float written to 17 significant digits.

    Non-finite floats become ``null``.
    """
    return _FLOAT_RE.sub(r"\1", json.dumps(_encode(obj), indent=1))


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_json(obj))
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def complex_matrix_to_json(M) -> list:
    M = np.asarray(M, dtype=complex)
    return [[[float(v.real), float(v.imag)] for v in row] for row in M]


def complex_matrix_from_json(data) -> np.ndarray:
    a = np.asarray(data, dtype=float)
    return a[..., 0] + 1j * a[..., 1]


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
