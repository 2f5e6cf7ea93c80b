"""Deterministic byte encoding of JSON-like values.

Signatures in this package are computed over these bytes, so two parties
that hold the same structured value always sign and verify the same octets.
The encoding is JSON with sorted keys, no insignificant whitespace, UTF-8
text and the shortest round-tripping form for numbers.
"""

from __future__ import annotations

import base64
import json
import math
from typing import Any

__all__ = [
    "CanonicalError",
    "b64url_decode",
    "b64url_encode",
    "canonical_decode",
    "canonical_encode",
]


class CanonicalError(ValueError):
    """Raised for values or byte strings outside the canonical domain."""


def _check(value: Any, path: str) -> None:
    if value is None or isinstance(value, (bool, str, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise CanonicalError(f"{path}: non-finite number")
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalError(f"{path}: object key {key!r} is not a string")
            _check(item, f"{path}.{key}")
        return
    raise CanonicalError(f"{path}: unsupported type {type(value).__name__}")


def canonical_encode(value: Any) -> bytes:
    """Encode ``value`` to canonical bytes.

    >>> canonical_encode({"b": 1, "a": [True, None, "x"]})
    b'{"a":[true,null,"x"],"b":1}'
    """
    _check(value, "$")
    text = json.dumps(
        value,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise CanonicalError(f"string is not valid UTF-8: {exc.reason}") from None


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise CanonicalError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _reject_constant(name: str) -> Any:
    raise CanonicalError(f"non-finite number {name}")


def canonical_decode(data: bytes) -> Any:
    """Decode canonical bytes; anything that would not re-encode identically is rejected."""
    try:
        text = data.decode("utf-8")
        value = json.loads(
            text, object_pairs_hook=_no_duplicates, parse_constant=_reject_constant
        )
    except CanonicalError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CanonicalError(f"not canonical JSON: {exc}") from None
    if canonical_encode(value) != data:
        raise CanonicalError("byte string is not in canonical form")
    return value


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict unpadded base64url decoding."""
    if not isinstance(text, str) or "=" in text:
        raise ValueError("expected unpadded base64url text")
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (ValueError, TypeError) as exc:
        raise ValueError(f"invalid base64url: {exc}") from None
    if b64url_encode(raw) != text:
        raise ValueError("non-canonical base64url")
    return raw
