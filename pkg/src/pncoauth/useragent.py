"""The driver's approver client.

The user agent pairs with the vehicle out of band, picks an EMSP, enters the
authorization details and later reviews what the authorization server shows
for the user code. It grants only when both the user code and the details
match what the driver saw and typed; every other path denies.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable
from urllib.parse import quote

from .core.canonical import canonical_encode
from .core.events import EventSink, NullSink
from .core.httpwire import (
    HttpParseError,
    HttpRequest,
    HttpResponse,
    Transport,
    TransportError,
    form_request,
    host_of,
    json_request,
    path_of,
)
from .core.model import (
    AuthorizationDetails,
    UserCode,
    details_from_list,
    details_list_to_wire,
    normalize_user_code,
    validate_authorization_details,
)
from .core.runtime import Clock, RandomSource, SystemClock, SystemRandomSource
from .pairing import PairingError, PairingInitiator, PairingOffer, SecureSession
from .vehicle import BLE_ERROR, BLE_PAIRING, BLE_SECURE, EmspDescriptor

log = logging.getLogger(__name__)

# raw frame out, raw frame back; the short-range link to the vehicle
BleLink = Callable[[bytes], bytes]


class UaError(Exception):
    def __init__(self, code: str, description: str = "", detail: Any = None) -> None:
        super().__init__(f"{code}: {description}" if description else code)
        self.code = code
        self.description = description
        self.detail = detail


class Verdict(str, Enum):
    GRANT = "grant"
    DENY = "deny"


@dataclass(frozen=True)
class ApprovalPolicy:
    """Scripted stand-in for the driver's review. A mismatch always denies."""

    expected_details: AuthorizationDetails | None = None
    expected_user_code_source: str = "from_ev_display"
    decision_on_match: Verdict = Verdict.GRANT
    decision_on_mismatch: Verdict = Verdict.DENY

    def __post_init__(self) -> None:
        if self.expected_user_code_source != "from_ev_display":
            raise ValueError("expected_user_code_source must be from_ev_display")
        if Verdict(self.decision_on_mismatch) is not Verdict.DENY:
            raise ValueError("decision_on_mismatch must be deny")
        object.__setattr__(self, "decision_on_match", Verdict(self.decision_on_match))
        object.__setattr__(self, "decision_on_mismatch", Verdict.DENY)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "ApprovalPolicy":
        unknown = set(obj) - {"expected_details", "expected_user_code_source", "decision_on_match", "decision_on_mismatch"}
        if unknown:
            raise ValueError(f"unknown policy fields: {sorted(unknown)}")
        details = obj.get("expected_details")
        if isinstance(details, list):
            details = details_from_list(details)
        elif details is not None:
            details = AuthorizationDetails.from_wire(details)
        return cls(
            expected_details=details,
            expected_user_code_source=obj.get("expected_user_code_source", "from_ev_display"),
            decision_on_match=Verdict(obj.get("decision_on_match", "grant")),
            decision_on_mismatch=Verdict(obj.get("decision_on_mismatch", "deny")),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ApprovalPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ProvisionTicket:
    emsp_id: str
    user_code: UserCode
    verification_uri: str
    verification_uri_complete: str


@dataclass(frozen=True)
class Review:
    """Outcome of one verify-and-decide round."""

    verdict: Verdict
    reasons: tuple[str, ...] = ()


class UserAgent:
    def __init__(
        self,
        name: str,
        *,
        transport: Transport,
        link: BleLink | None = None,
        user_id: str = "",
        password: str = "",
        clock: Clock | None = None,
        rng: RandomSource | None = None,
        events: EventSink | None = None,
        prompt: Callable[[str], str] | None = None,
        output: Callable[[str], None] | None = None,
    ) -> None:
        self.name = name
        self.transport = transport
        self.link = link
        self.user_id = user_id
        self.password = password
        self.clock = clock or SystemClock()
        self.rng = rng or SystemRandomSource()
        self.events = events if events is not None else NullSink()
        self.prompt = prompt or input
        self.output = output or print
        self.session: SecureSession | None = None
        self.expected_details: AuthorizationDetails | None = None
        self.ticket: ProvisionTicket | None = None
        self.emsps: list[EmspDescriptor] = []
        self._cookies: dict[str, str] = {}

    # -- pairing -----------------------------------------------------------

    def _ble(self, frame: bytes) -> bytes:
        if self.link is None:
            raise UaError("no_link", "no short-range link to a vehicle")
        try:
            reply = self.link(frame)
        except TransportError as exc:
            raise UaError("ev_unreachable", str(exc)) from None
        if reply[:1] == BLE_ERROR:
            raise PairingError(reply[1:].decode("utf-8", "replace"))
        return reply

    def pair(self, offer: PairingOffer) -> SecureSession:
        """Pair using the code from the QR. Only public keys and MACs cross the link."""
        initiator = PairingInitiator(offer, self.rng)
        reply = self._ble(BLE_PAIRING + canonical_encode({"step": "hello", **initiator.hello()}))
        try:
            msg = json.loads(reply[1:].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise PairingError("malformed pairing reply") from None
        finish, session = initiator.confirm(msg)
        self._ble(BLE_PAIRING + canonical_encode({"step": "finish", **finish}))
        self.session = session
        self.events.note(self.name, "paired", device=offer.device_name)
        return session

    def _ev_call(self, request: HttpRequest) -> HttpResponse:
        if self.session is None:
            raise UaError("not_paired")
        reply = self._ble(BLE_SECURE + self.session.seal(request.to_bytes()))
        if reply[:1] != BLE_SECURE:
            raise PairingError("unexpected frame from vehicle")
        try:
            return HttpResponse.parse(self.session.open(reply[1:]))
        except HttpParseError as exc:
            raise UaError("ev_error", str(exc)) from None

    # -- provisioning --------------------------------------------------------

    def fetch_emsps(self) -> list[EmspDescriptor]:
        response = self._ev_call(json_request("GET", "/emsps"))
        body = response.json()
        if response.status != 200:
            raise UaError(body.get("error", "ev_error"), body.get("error_description", ""), detail=body)
        self.emsps = [EmspDescriptor.from_wire(item) for item in body]
        return self.emsps

    def configure_and_submit(self, emsp_id: str, details: AuthorizationDetails) -> ProvisionTicket:
        result = validate_authorization_details(details, self.clock.now())
        if not result.ok:
            raise UaError("invalid_authorization_details", "; ".join(result.violations))
        response = self._ev_call(
            json_request(
                "POST", "/provision", {"emsp_id": emsp_id, "authorization_details": details_list_to_wire(details)}
            )
        )
        body = response.json()
        if response.status != 200:
            # the vehicle's error, passed on as-is
            raise UaError(body.get("error", "ev_error"), body.get("error_description", ""), detail=body)
        self.expected_details = details
        self.ticket = ProvisionTicket(
            emsp_id,
            UserCode(body["user_code"]),
            body["verification_uri"],
            body.get("verification_uri_complete", ""),
        )
        return self.ticket

    # -- review at the authorization server ----------------------------------

    def login(self, as_base: str) -> str:
        response = self.transport(
            as_base,
            form_request(
                path_of(as_base, "/login"), {"user_id": self.user_id, "password": self.password}, host=host_of(as_base)
            ),
        )
        if response.status != 200:
            raise UaError("login_failed", response.body.decode("utf-8", "replace"))
        cookie = response.header("Set-Cookie") or ""
        value = cookie.split(";", 1)[0].partition("=")[2]
        if not value:
            raise UaError("login_failed", "no session cookie")
        self._cookies[as_base] = value
        return value

    def _as_call(self, as_base: str, request: HttpRequest) -> HttpResponse:
        request.headers.append(("Cookie", f"session={self._cookies[as_base]}"))
        try:
            return self.transport(as_base, request)
        except TransportError as exc:
            raise UaError("as_unreachable", str(exc)) from None

    def verify_and_decide(
        self,
        as_base: str,
        user_code_param: UserCode | str,
        ev_displayed_code: UserCode | str | None,
        policy: ApprovalPolicy | None = None,
        interactive: bool = False,
    ) -> Review:
        """Fetch the pending request, compare, and send grant or deny."""
        try:
            if as_base not in self._cookies:
                self.login(as_base)
        except TransportError as exc:
            raise UaError("as_unreachable", str(exc)) from None
        try:
            param = normalize_user_code(str(user_code_param))
        except ValueError:
            raise UaError("not_found", "malformed user code") from None
        response = self._as_call(
            as_base, json_request("GET", path_of(as_base, "/verify") + "?user_code=" + quote(param), host=host_of(as_base))
        )
        if response.status == 401:
            self._cookies.pop(as_base, None)
            raise UaError("login_failed", "authorization server rejected the session")
        if response.status != 200:
            raise UaError("not_found", "no pending request for this user code")
        view = response.json()

        expected = (policy.expected_details if policy else None) or self.expected_details
        reasons = self._compare(view, param, ev_displayed_code, expected)
        if reasons:
            verdict = Verdict.DENY
            self.events.mismatch(self.name, "; ".join(reasons))
        elif interactive:
            verdict = self._ask(view)
        elif policy is not None:
            verdict = policy.decision_on_match
        else:
            verdict = Verdict.DENY
            reasons = ["no approval policy"]

        decision = self._as_call(
            as_base,
            form_request(
                path_of(as_base, "/decision"), {"user_code": param, "decision": verdict.value}, host=host_of(as_base)
            ),
        )
        if decision.status != 200:
            log.warning("decision not recorded: %s", decision.body[:200])
        self.events.note(self.name, "decision_sent", decision=verdict.value, status=decision.status)
        return Review(verdict, tuple(reasons))

    @staticmethod
    def _compare(
        view: Any, param: str, ev_code: UserCode | str | None, expected: AuthorizationDetails | None
    ) -> list[str]:
        reasons = []
        try:
            shown = normalize_user_code(str(view["user_code"]))
        except (KeyError, TypeError, ValueError):
            return ["verification page malformed"]
        try:
            ev = normalize_user_code(str(ev_code)) if ev_code is not None else None
        except ValueError:
            ev = None
        if ev is None or ev != param or ev != shown:
            reasons.append("user code differs from the vehicle display")
        if expected is None:
            reasons.append("no expected details recorded")
        else:
            try:
                offered = details_from_list(view["authorization_details"])
            except (KeyError, ValueError):
                reasons.append("authorization details unreadable")
            else:
                if offered.canonical() != expected.canonical():
                    reasons.append("authorization details differ from what was entered")
        return reasons

    def _ask(self, view: dict[str, Any]) -> Verdict:
        self.output(f"Client:  {view.get('client_id')}")
        self.output(f"Scope:   {view.get('scope')}")
        self.output("Details: " + json.dumps(view.get("authorization_details"), indent=2, sort_keys=True))
        self.output(f"Code:    {view.get('user_code')}")
        answer = self.prompt("Grant this request? [y/N] ").strip().lower()
        return Verdict.GRANT if answer in ("y", "yes") else Verdict.DENY
