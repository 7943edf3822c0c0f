"""Canonical JSON, digests and the numeric conventions shared by all modules."""

from __future__ import annotations

import hashlib
import json
import math
from decimal import Decimal
from typing import Any


def canonical_json(obj: Any) -> str:
    # json.dumps renders floats with repr(), i.e. shortest round-trip form
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def canonical_bytes(obj: Any) -> bytes:
    return canonical_json(obj).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sig6(x: float) -> float:
    """Round to 6 significant figures (used before every limit or equality check)."""
    if x == 0 or not math.isfinite(x):
        return float(x)
    return float(f"{x:.6g}")


def keyed_string(x: float) -> str:
    """Render a value the way an operator would key it: plain decimal, no exponent.

    >>> keyed_string(12.5), keyed_string(100.0), keyed_string(0.05)
    ('12.5', '100', '0.05')
    """
    s = format(Decimal(repr(float(x))), "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return s or "0"


def parse_keyed(s: str) -> float:
    return float(s) if s.strip(".") else 0.0
