"""Locale-independent number and JSON formatting for emitted files."""
import hashlib
import json
import math
from typing import Any

import numpy as np


def format_float(value: Any) -> str:
    """17 significant digits with '.' separator; nan and infinities spelled out."""
    x = float(value)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x == 0.0:
        # collapses -0.0
        return "0"
    return format(x, ".17g")


def _plain(value: Any) -> Any:
    """numpy values to builtins; non-finite floats become strings since JSON has no literal for them."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        if not math.isfinite(value):
            return format_float(value)
        return 0.0 if value == 0.0 else value
    return value


def canonical_json(value: Any) -> str:
    """Sorted-key compact JSON used for hashing."""
    return json.dumps(_plain(value), sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def pretty_json(value: Any) -> str:
    return json.dumps(_plain(value), sort_keys=True, indent=2, ensure_ascii=False, default=str) + "\n"


def config_hash(value: Any) -> str:
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()
