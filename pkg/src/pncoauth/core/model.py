"""Domain types shared by every actor: money, authorization details, scopes, codes."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any

from .canonical import b64url_decode, b64url_encode, canonical_encode
from .runtime import RandomSource

PNC_DETAIL_TYPE = "pnc_contract_provisioning"
PROVISIONING_SCOPE = "pnc:contract_cert"
DEVICE_CODE_GRANT_TYPE = "urn:ietf:params:oauth:grant-type:device_code"

USER_CODE_ALPHABET = "BCDFGHJKLMNPQRSTVWXZ"
USER_CODE_LENGTH = 8
DEVICE_CODE_BYTES = 32

_AMOUNT_RE = re.compile(r"^(0|[1-9][0-9]*)\.([0-9]{2})$")
_CURRENCY_RE = re.compile(r"^[A-Z]{3}$")
_SCOPE_TOKEN_RE = re.compile(r"^[a-z0-9:_-]+$")
_TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(Z|\+00:00)$")


# -- timestamps ------------------------------------------------------------


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC 3339 UTC timestamp with second precision."""
    if not isinstance(text, str) or not _TIMESTAMP_RE.match(text):
        raise ValueError(f"not a second-precision UTC timestamp: {text!r}")
    return datetime.fromisoformat(text.replace("Z", "+00:00"))


def format_timestamp(value: datetime) -> str:
    return to_utc(value).strftime("%Y-%m-%dT%H:%M:%SZ")


def to_utc(value: datetime) -> datetime:
    if value.tzinfo is None:
        raise ValueError("naive datetimes are not accepted; use UTC")
    value = value.astimezone(timezone.utc)
    if value.microsecond:
        raise ValueError("timestamps carry second precision only")
    return value


# -- identifiers -----------------------------------------------------------


def check_identifier(value: str, what: str = "identifier") -> str:
    if not isinstance(value, str) or not 1 <= len(value) <= 64:
        raise ValueError(f"{what} must be a 1-64 character string")
    return value


# -- money -----------------------------------------------------------------


@dataclass(frozen=True)
class Money:
    """Non-negative amount in integer minor units (cents) plus an ISO 4217 code."""

    cents: int
    currency: str

    def __post_init__(self) -> None:
        if isinstance(self.cents, bool) or not isinstance(self.cents, int):
            raise TypeError("cents must be an int")
        if self.cents < 0:
            raise ValueError("money amounts are non-negative")
        if not isinstance(self.currency, str) or not _CURRENCY_RE.match(self.currency):
            raise ValueError(f"invalid currency code {self.currency!r}")

    @classmethod
    def parse(cls, amount: str, currency: str) -> "Money":
        m = _AMOUNT_RE.match(amount) if isinstance(amount, str) else None
        if not m:
            raise ValueError(f"amount must look like '25.00', got {amount!r}")
        return cls(int(m.group(1)) * 100 + int(m.group(2)), currency)

    @property
    def amount(self) -> str:
        return f"{self.cents // 100}.{self.cents % 100:02d}"

    def to_wire(self) -> dict[str, str]:
        return {"amount": self.amount, "currency": self.currency}

    @classmethod
    def from_wire(cls, obj: Any) -> "Money":
        if not isinstance(obj, dict) or set(obj) != {"amount", "currency"}:
            raise ValueError("money must be an object with amount and currency")
        return cls.parse(obj["amount"], obj["currency"])

    def __add__(self, other: "Money") -> "Money":
        if not isinstance(other, Money):
            return NotImplemented
        if other.currency != self.currency:
            raise ValueError("cannot add amounts in different currencies")
        return Money(self.cents + other.cents, self.currency)

    def __str__(self) -> str:
        return f"{self.amount} {self.currency}"


# -- authorization details -------------------------------------------------


@dataclass(frozen=True)
class AuthorizationDetails:
    """The contract-provisioning entry of an ``authorization_details`` array.

    Construction only checks shape. Semantic rules (ordering of the period,
    cap relation, shared currency) are reported by
    :func:`validate_authorization_details` so callers can show all problems
    at once.
    """

    period_start: datetime
    period_end: datetime
    max_period_expenses: Money
    max_daily_expenses: Money
    detail_type: str = PNC_DETAIL_TYPE

    def __post_init__(self) -> None:
        object.__setattr__(self, "period_start", to_utc(self.period_start))
        object.__setattr__(self, "period_end", to_utc(self.period_end))
        for name in ("max_period_expenses", "max_daily_expenses"):
            if not isinstance(getattr(self, name), Money):
                raise TypeError(f"{name} must be Money")

    def to_wire(self) -> dict[str, Any]:
        return {
            "type": self.detail_type,
            "authorization_period": {
                "start": format_timestamp(self.period_start),
                "end": format_timestamp(self.period_end),
            },
            "max_period_expenses": self.max_period_expenses.to_wire(),
            "max_daily_expenses": self.max_daily_expenses.to_wire(),
        }

    @classmethod
    def from_wire(cls, obj: Any) -> "AuthorizationDetails":
        expected = {"type", "authorization_period", "max_period_expenses", "max_daily_expenses"}
        if not isinstance(obj, dict) or set(obj) != expected:
            raise ValueError("authorization details have missing or unexpected members")
        period = obj["authorization_period"]
        if not isinstance(period, dict) or set(period) != {"start", "end"}:
            raise ValueError("authorization_period needs exactly start and end")
        if not isinstance(obj["type"], str):
            raise ValueError("type must be a string")
        return cls(
            period_start=parse_timestamp(period["start"]),
            period_end=parse_timestamp(period["end"]),
            max_period_expenses=Money.from_wire(obj["max_period_expenses"]),
            max_daily_expenses=Money.from_wire(obj["max_daily_expenses"]),
            detail_type=obj["type"],
        )

    def canonical(self) -> bytes:
        return canonical_encode(self.to_wire())


def details_list_to_wire(details: AuthorizationDetails) -> list[dict[str, Any]]:
    """Wrap as the single-element RFC 9396 ``authorization_details`` array."""
    return [details.to_wire()]


def details_from_list(obj: Any, detail_type: str = PNC_DETAIL_TYPE) -> AuthorizationDetails:
    if not isinstance(obj, list) or len(obj) != 1:
        raise ValueError("authorization_details must hold exactly one entry")
    details = AuthorizationDetails.from_wire(obj[0])
    if details.detail_type != detail_type:
        raise ValueError(f"unsupported authorization details type {details.detail_type!r}")
    return details


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def invariant_violations(
    d: AuthorizationDetails, detail_type: str = PNC_DETAIL_TYPE
) -> list[str]:
    """Time-independent rule violations of ``d``."""
    out = []
    if d.detail_type != detail_type:
        out.append("unsupported detail type")
    if d.period_start == d.period_end:
        out.append("empty period")
    elif d.period_start > d.period_end:
        out.append("period ends before it starts")
    if d.max_daily_expenses.currency != d.max_period_expenses.currency:
        out.append("currency mismatch")
    elif d.max_daily_expenses.cents > d.max_period_expenses.cents:
        out.append("daily exceeds period cap")
    return out


def validate_authorization_details(
    d: AuthorizationDetails, now: datetime, detail_type: str = PNC_DETAIL_TYPE
) -> ValidationResult:
    violations = invariant_violations(d, detail_type)
    if to_utc(now) >= d.period_end:
        violations.append("period already ended")
    return ValidationResult(tuple(violations))


# -- scope -----------------------------------------------------------------


@dataclass(frozen=True)
class Scope:
    """Ordered set of scope tokens; space-delimited on the wire."""

    entries: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        seen: list[str] = []
        for token in self.entries:
            if not isinstance(token, str) or not _SCOPE_TOKEN_RE.match(token):
                raise ValueError(f"invalid scope token {token!r}")
            if token not in seen:
                seen.append(token)
        object.__setattr__(self, "entries", tuple(seen))

    @classmethod
    def parse(cls, text: str) -> "Scope":
        if not isinstance(text, str):
            raise ValueError("scope must be a string")
        return cls(tuple(t for t in text.split(" ") if t))

    @classmethod
    def of(cls, *tokens: str) -> "Scope":
        return cls(tuple(tokens))

    def __str__(self) -> str:
        return " ".join(self.entries)

    def __contains__(self, token: object) -> bool:
        return token in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def covers(self, required: "Scope") -> bool:
        return set(required.entries) <= set(self.entries)


# -- user and device codes -------------------------------------------------


@dataclass(frozen=True)
class UserCode:
    """Eight consonants, shown as ``XXXX-XXXX``; equality ignores hyphen and case."""

    code: str

    def __post_init__(self) -> None:
        normalized = normalize_user_code(self.code)
        object.__setattr__(self, "code", normalized)

    @classmethod
    def generate(cls, rng: RandomSource) -> "UserCode":
        n = len(USER_CODE_ALPHABET)
        return cls("".join(USER_CODE_ALPHABET[rng.randbelow(n)] for _ in range(USER_CODE_LENGTH)))

    @property
    def display(self) -> str:
        return f"{self.code[:4]}-{self.code[4:]}"

    def __str__(self) -> str:
        return self.display

    def matches(self, other: "UserCode | str") -> bool:
        try:
            other_code = other.code if isinstance(other, UserCode) else normalize_user_code(other)
        except ValueError:
            return False
        return other_code == self.code


def normalize_user_code(text: str) -> str:
    if not isinstance(text, str):
        raise ValueError("user code must be a string")
    code = text.replace("-", "").upper()
    if len(code) != USER_CODE_LENGTH or any(c not in USER_CODE_ALPHABET for c in code):
        raise ValueError(f"malformed user code {text!r}")
    return code


def new_device_code(rng: RandomSource) -> str:
    return b64url_encode(rng.token_bytes(DEVICE_CODE_BYTES))


def is_device_code(text: str) -> bool:
    try:
        return len(b64url_decode(text)) == DEVICE_CODE_BYTES
    except ValueError:
        return False
