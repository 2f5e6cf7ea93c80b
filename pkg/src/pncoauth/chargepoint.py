"""Charge point: PnC challenge-response, certificate-embedded cost caps, meter receipts.

Deliberately independent of OAuth. Everything the charge point needs is in
the contract certificate, so this module only depends on the core model and
the PKI.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Any, Hashable, Iterable

from .core.canonical import b64url_decode, b64url_encode, canonical_encode
from .core.events import EventSink, NullSink
from .core.httpwire import HttpParseError, HttpRequest, HttpResponse, json_response
from .core.model import AuthorizationDetails, Money, format_timestamp, parse_timestamp, to_utc
from .core.runtime import Clock, RandomSource, SystemClock, SystemRandomSource
from .pki import (
    EXPIRED,
    Certificate,
    CertificateChain,
    MalformedDocument,
    Signature,
    validate_chain,
    verify_signature,
)

CHALLENGE_BYTES = 32
CHALLENGE_TTL = 60

AUTHORIZED = "authorized"
BAD_SIGNATURE = "bad-signature"
BAD_CHAIN = "bad-chain"
EXPIRED_CERT = "expired"
UNKNOWN_NONCE = "unknown-nonce"
NON_MONOTONIC = "non-monotonic"

DAILY_CAP = "daily_cap"
PERIOD_CAP = "period_cap"
CURRENCY_MISMATCH = "currency_mismatch"


def challenge_bytes(nonce: bytes, serial: int) -> bytes:
    """What the vehicle signs to answer a challenge."""
    return canonical_encode({"nonce": b64url_encode(nonce), "serial": str(serial)})


@dataclass(frozen=True)
class PncAnswer:
    certificate: Certificate
    chain: CertificateChain
    signature: Signature

    def to_wire(self) -> dict[str, Any]:
        return {
            "certificate": self.certificate.to_wire(),
            "chain": self.chain.to_wire(),
            "alg": self.signature.algorithm_id,
            "signature": b64url_encode(self.signature.value),
        }

    @classmethod
    def from_wire(cls, obj: Any) -> "PncAnswer":
        try:
            return cls(
                Certificate.from_wire(obj["certificate"]),
                CertificateChain.from_wire(obj["chain"]),
                Signature(obj["alg"], b64url_decode(obj["signature"])),
            )
        except (KeyError, TypeError, ValueError, MalformedDocument) as exc:
            raise ValueError(f"malformed PnC answer: {exc}") from None


@dataclass(frozen=True)
class MeterReceipt:
    session_id: str
    cumulative_wh: int
    price: Money
    timestamp: datetime
    certificate_serial: int
    ev_signature: Signature

    def body(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "cumulative_wh": self.cumulative_wh,
            "price": self.price.to_wire(),
            "timestamp": format_timestamp(self.timestamp),
            "serial": str(self.certificate_serial),
        }

    def signed_bytes(self) -> bytes:
        return canonical_encode(self.body())

    def to_wire(self) -> dict[str, Any]:
        return {**self.body(), "alg": self.ev_signature.algorithm_id, "sig": b64url_encode(self.ev_signature.value)}

    @classmethod
    def from_wire(cls, obj: Any) -> "MeterReceipt":
        try:
            wh = obj["cumulative_wh"]
            if isinstance(wh, bool) or not isinstance(wh, int) or wh < 0:
                raise ValueError("cumulative_wh must be a non-negative integer")
            serial = obj["serial"]
            if not isinstance(serial, str) or not serial.isdigit():
                raise ValueError("serial must be a decimal string")
            return cls(
                session_id=str(obj["session_id"]),
                cumulative_wh=wh,
                price=Money.from_wire(obj["price"]),
                timestamp=parse_timestamp(obj["timestamp"]),
                certificate_serial=int(serial),
                ev_signature=Signature(obj["alg"], b64url_decode(obj["sig"])),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed meter receipt: {exc}") from None


@dataclass(frozen=True)
class PncVerdict:
    reason: str | None
    serial: int | None = None

    @property
    def authorized(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.authorized


@dataclass(frozen=True)
class CostDecision:
    reason: str | None

    @property
    def permit(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.permit


@dataclass(frozen=True)
class ReceiptVerdict:
    reason: str | None

    @property
    def ok(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class ExpenseLedger:
    """Running totals per (serial, UTC day) and per serial.

    Caps are inclusive. All updates happen under one lock, so concurrent
    sessions for the same certificate serialize.
    """

    daily: dict[tuple[Hashable, date], int] = field(default_factory=dict)
    period: dict[Hashable, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def authorize_session_cost(
        self, serial: Hashable, constraints: AuthorizationDetails, cost: Money, day: date | datetime
    ) -> CostDecision:
        if cost.cents < 0:
            raise ValueError("cost must not be negative")
        if isinstance(day, datetime):
            day = to_utc(day).date()
        daily_cap, period_cap = constraints.max_daily_expenses, constraints.max_period_expenses
        if cost.currency != daily_cap.currency or cost.currency != period_cap.currency:
            return CostDecision(CURRENCY_MISMATCH)
        with self._lock:
            spent_today = self.daily.get((serial, day), 0)
            spent_period = self.period.get(serial, 0)
            if spent_today + cost.cents > daily_cap.cents:
                return CostDecision(DAILY_CAP)
            if spent_period + cost.cents > period_cap.cents:
                return CostDecision(PERIOD_CAP)
            self.daily[(serial, day)] = spent_today + cost.cents
            self.period[serial] = spent_period + cost.cents
        return CostDecision(None)

    def spent(self, serial: Hashable, day: date | None = None) -> int:
        with self._lock:
            if day is None:
                return self.period.get(serial, 0)
            return self.daily.get((serial, day), 0)


@dataclass
class _Challenge:
    issued_at: datetime


class ChargePoint:
    def __init__(
        self,
        cp_id: str,
        trust_roots: Iterable[Certificate],
        *,
        clock: Clock | None = None,
        rng: RandomSource | None = None,
        events: EventSink | None = None,
        challenge_ttl: int = CHALLENGE_TTL,
    ) -> None:
        self.cp_id = cp_id
        self.trust_roots = list(trust_roots)
        self.clock = clock or SystemClock()
        self.rng = rng or SystemRandomSource()
        self.events = events if events is not None else NullSink()
        self.challenge_ttl = challenge_ttl
        self.ledger = ExpenseLedger()
        self.authorized: dict[int, Certificate] = {}
        # insertion order is issue order, so expiry only looks at the front
        self._challenges: OrderedDict[bytes, _Challenge] = OrderedDict()
        self._last_wh: dict[str, int] = {}
        self._lock = threading.Lock()

    def issue_challenge(self) -> bytes:
        now = self.clock.now()
        with self._lock:
            self._expire(now)
            nonce = self.rng.token_bytes(CHALLENGE_BYTES)
            while nonce in self._challenges:
                nonce = self.rng.token_bytes(CHALLENGE_BYTES)
            self._challenges[nonce] = _Challenge(now)
        return nonce

    def _expire(self, now: datetime) -> None:
        ttl = timedelta(seconds=self.challenge_ttl)
        while self._challenges:
            nonce, challenge = next(iter(self._challenges.items()))
            if now <= challenge.issued_at + ttl:
                break
            del self._challenges[nonce]

    def _take_nonce(self, nonce: bytes, now: datetime) -> bool:
        with self._lock:
            challenge = self._challenges.pop(nonce, None)
        return challenge is not None and now <= challenge.issued_at + timedelta(seconds=self.challenge_ttl)

    def _root_for(self, chain: CertificateChain) -> Certificate | None:
        wire = chain.root.to_wire()
        for root in self.trust_roots:
            if root.to_wire() == wire:
                return root
        return None

    def verify_pnc_response(
        self,
        nonce: bytes,
        answer: PncAnswer,
        trust_root: Certificate | None = None,
        now: datetime | None = None,
    ) -> PncVerdict:
        """Consume ``nonce`` and check the answer; the nonce is gone either way."""
        now = to_utc(now) if now is not None else self.clock.now()
        if not self._take_nonce(nonce, now):
            return self._verdict(UNKNOWN_NONCE, None)
        cert = answer.certificate
        root = trust_root or self._root_for(answer.chain)
        if root is None or cert.is_ca or cert.constraints is None:
            return self._verdict(BAD_CHAIN, cert.serial)
        checked = validate_chain(cert, answer.chain, root, now)
        if not checked.ok:
            return self._verdict(EXPIRED_CERT if checked.reason == EXPIRED else BAD_CHAIN, cert.serial)
        if answer.signature.algorithm_id != cert.key_alg or not verify_signature(
            cert.public_key, challenge_bytes(nonce, cert.serial), answer.signature
        ):
            return self._verdict(BAD_SIGNATURE, cert.serial)
        with self._lock:
            self.authorized[cert.serial] = cert
        return self._verdict(None, cert.serial)

    def _verdict(self, reason: str | None, serial: int | None) -> PncVerdict:
        self.events.note(self.cp_id, "pnc_verdict", result=reason or AUTHORIZED, serial=serial)
        return PncVerdict(reason, serial)

    def authorize_session_cost(
        self, serial: int, constraints: AuthorizationDetails, cost: Money, day: date | datetime
    ) -> CostDecision:
        return self.ledger.authorize_session_cost(serial, constraints, cost, day)

    def authorize_cost_for(self, serial: int, cost: Money, day: date | datetime) -> CostDecision:
        """Ledger check using the constraints of a previously authorized certificate."""
        with self._lock:
            cert = self.authorized.get(serial)
        if cert is None or cert.constraints is None:
            return CostDecision("not_authorized")
        return self.authorize_session_cost(serial, cert.constraints, cost, day)

    def accept_meter_receipt(self, receipt: MeterReceipt, cert: Certificate) -> ReceiptVerdict:
        if (
            receipt.certificate_serial != cert.serial
            or receipt.ev_signature.algorithm_id != cert.key_alg
            or not verify_signature(cert.public_key, receipt.signed_bytes(), receipt.ev_signature)
        ):
            return ReceiptVerdict(BAD_SIGNATURE)
        with self._lock:
            last = self._last_wh.get(receipt.session_id)
            if last is not None and receipt.cumulative_wh < last:
                return ReceiptVerdict(NON_MONOTONIC)
            self._last_wh[receipt.session_id] = receipt.cumulative_wh
        return ReceiptVerdict(None)

    # -- HTTP binding, used by the simulator and the demo CLI --------------

    def handle(self, request: HttpRequest) -> HttpResponse:
        try:
            if (request.method, request.path) == ("POST", "/pnc/challenge"):
                return json_response(200, {"challenge": b64url_encode(self.issue_challenge())})
            if (request.method, request.path) == ("POST", "/pnc/authorize"):
                body = request.json()
                nonce = b64url_decode(body["challenge"])
                verdict = self.verify_pnc_response(nonce, PncAnswer.from_wire(body))
                if verdict.authorized:
                    return json_response(200, {"status": AUTHORIZED, "serial": str(verdict.serial)})
                return json_response(403, {"status": "rejected", "reason": verdict.reason})
            if (request.method, request.path) == ("POST", "/pnc/meter_receipt"):
                receipt = MeterReceipt.from_wire(request.json()["receipt"])
                with self._lock:
                    cert = self.authorized.get(receipt.certificate_serial)
                if cert is None:
                    return json_response(403, {"status": "rejected", "reason": "not_authorized"})
                result = self.accept_meter_receipt(receipt, cert)
                if result.ok:
                    return json_response(200, {"status": "ok"})
                return json_response(400, {"status": "rejected", "reason": result.reason})
        except (HttpParseError, KeyError, TypeError, ValueError) as exc:
            return json_response(400, {"error": "invalid_request", "error_description": str(exc)})
        return json_response(404, {"error": "not_found"})
