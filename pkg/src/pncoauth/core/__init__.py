"""Shared domain model and plumbing used by every actor."""

from .canonical import CanonicalError, b64url_decode, b64url_encode, canonical_decode, canonical_encode
from .model import (
    DEVICE_CODE_GRANT_TYPE,
    PNC_DETAIL_TYPE,
    PROVISIONING_SCOPE,
    AuthorizationDetails,
    Money,
    Scope,
    UserCode,
    ValidationResult,
    format_timestamp,
    parse_timestamp,
    validate_authorization_details,
)
from .runtime import Clock, RandomSource, SeededRandomSource, SystemClock, SystemRandomSource, VirtualClock

__all__ = [
    "AuthorizationDetails",
    "CanonicalError",
    "Clock",
    "DEVICE_CODE_GRANT_TYPE",
    "Money",
    "PNC_DETAIL_TYPE",
    "PROVISIONING_SCOPE",
    "RandomSource",
    "Scope",
    "SeededRandomSource",
    "SystemClock",
    "SystemRandomSource",
    "UserCode",
    "ValidationResult",
    "VirtualClock",
    "b64url_decode",
    "b64url_encode",
    "canonical_decode",
    "canonical_encode",
    "format_timestamp",
    "parse_timestamp",
    "validate_authorization_details",
]
