"""Named adversary presets and a deliberately malicious vehicle."""

from __future__ import annotations

import json
from dataclasses import replace
from datetime import timedelta
from typing import Any

from ..core.canonical import canonical_encode
from ..core.httpwire import HttpParseError, HttpRequest, form_request, host_of, json_response, path_of
from ..core.model import (
    DEVICE_CODE_GRANT_TYPE,
    PROVISIONING_SCOPE,
    AuthorizationDetails,
    Money,
    details_list_to_wire,
)
from ..core.runtime import SeededRandomSource
from ..pairing import PairingError, PairingInitiator, PairingOffer, PairingResponder, SecureSession
from ..pki import CertificateAuthority, CertificateSigningRequest, MalformedDocument, SoftHSM
from ..vehicle import ElectricVehicle
from .channels import (
    PAIRED_SYMMETRIC,
    SERVER_AUTH,
    Adversary,
    Message,
    kem_open_request,
    kem_seal_response,
)

TAMPER_FIELDS = ("period_start", "period_end", "max_period_expenses", "max_daily_expenses")


class DropAll(Adversary):
    """Drops every message on server-authenticated channels."""

    name = "drop_all"

    def intercept(self, msg: Message) -> list[bytes | None]:
        if msg.kind == SERVER_AUTH:
            return [None]
        return [msg.data]


class MitmPairing(Adversary):
    """Sits on the short-range link during pairing and substitutes its own keys.

    Without the QR code it can only guess the out-of-band code. A wrong
    guess makes key confirmation fail at the user agent. On a correct guess
    it relays and reads all paired traffic, which is the known limit of a
    short numeric code.
    """

    name = "mitm_pairing"

    def __init__(self, rng: SeededRandomSource, attempts: int = 1, digits: int = 6) -> None:
        super().__init__()
        self.rng = rng
        self.attempts = attempts
        self.digits = digits
        self.successes = 0
        self.failures = 0
        self._ua_hello: Any = None
        self._to_ev: PairingInitiator | None = None
        self._to_ua: PairingResponder | None = None
        self._finish_for_ev: dict[str, str] | None = None
        self._ev_session: SecureSession | None = None
        self._ua_session: SecureSession | None = None
        self._hello: Message | None = None

    def _pairing_msg(self, data: bytes) -> Any:
        try:
            return json.loads(data[1:].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return None

    def intercept(self, msg: Message) -> list[bytes | None]:
        if msg.kind != PAIRED_SYMMETRIC:
            return [msg.data]
        if msg.data[:1] == b"S" and self._ua_session is not None and self._ev_session is not None:
            return [self._relay(msg)]
        if msg.data[:1] != b"P":
            return [msg.data]
        body = self._pairing_msg(msg.data)
        if msg.direction == "request" and isinstance(body, dict) and body.get("step") == "hello":
            if self.attempts <= 0:
                return [msg.data]
            self.attempts -= 1
            guess = f"{self.rng.randbelow(10 ** self.digits):0{self.digits}d}"
            self._ua_hello = body
            self._to_ev = PairingInitiator(PairingOffer(msg.dst, guess), self.rng)
            self._to_ua = PairingResponder(guess, self.rng)
            self._finish_for_ev = None
            self._hello = msg
            self.log.append(f"substituted pairing key, guessed {guess}")
            return [b"P" + canonical_encode({"step": "hello", **self._to_ev.hello()})]
        if msg.direction == "response" and msg.request is self._hello and self._to_ua is not None:
            assert self._to_ev is not None
            try:
                self._finish_for_ev, self._ev_session = self._to_ev.confirm(body)
            except PairingError:
                self._finish_for_ev = None
            return [b"P" + canonical_encode(self._to_ua.respond(self._ua_hello))]
        if msg.direction == "request" and isinstance(body, dict) and body.get("step") == "finish" and self._to_ua is not None:
            try:
                self._ua_session = self._to_ua.finish(body)
            except PairingError:
                self._ua_session = None
            self._to_ua = None
            if self._finish_for_ev is None or self._ua_session is None:
                self.failures += 1
                return [msg.data]
            self.successes += 1
            self.log.append("pairing relay established")
            return [b"P" + canonical_encode({"step": "finish", **self._finish_for_ev})]
        return [msg.data]

    def on_pairing_failed(self) -> None:
        self.failures += 1
        self._to_ua = None

    def _relay(self, msg: Message) -> bytes:
        assert self._ua_session is not None and self._ev_session is not None
        try:
            if msg.direction == "request":
                plain = self._ua_session.open(msg.data[1:])
                self.knowledge.learn(plain, "pairing relay")
                return b"S" + self._ev_session.seal(plain)
            plain = self._ev_session.open(msg.data[1:])
            self.knowledge.learn(plain, "pairing relay")
            return b"S" + self._ua_session.seal(plain)
        except PairingError:
            return msg.data


class TokenReplay(Adversary):
    """Steals the token response by traffic analysis, then replays captured polls.

    The adversary cannot read the AS traffic. It drops the first large
    response after the device authorization (that is the token) and replays
    the ciphertext of the request that produced it.
    """

    name = "token_replay"

    def __init__(self, client: str, as_base: str, threshold: int = 700) -> None:
        super().__init__()
        self.client = client
        self.as_base = as_base
        self.threshold = threshold
        self.responses_seen = 0
        self.dropped: Message | None = None
        self.replayed = 0
        self.replay_results: list[bool] = []

    def intercept(self, msg: Message) -> list[bytes | None]:
        if msg.kind != SERVER_AUTH or msg.base != self.as_base:
            return [msg.data]
        if msg.direction == "response" and msg.dst == self.client:
            self.responses_seen += 1
            if self.dropped is None and self.responses_seen > 1 and len(msg.data) > self.threshold:
                self.dropped = msg
                self.log.append(f"dropped {len(msg.data)}-byte response")
                return [None]
            return [msg.data]
        if msg.direction == "request" and self.dropped is not None and self.replayed == 0:
            assert self.dropped.request is not None
            self.replayed += 1
            return [msg.data, self.dropped.request.data]
        return [msg.data]

    def on_injected_response(self, msg: Message, response: bytes | None) -> None:
        self.replay_results.append(response is not None)


class RogueCa(Adversary):
    """With the RS transport key, answers the CSR with a certificate from its own root."""

    name = "rogue_ca"

    def __init__(self, rs_base: str, ca_name: str, rng: SeededRandomSource) -> None:
        super().__init__()
        self.rs_base = rs_base
        self.ca_name = ca_name
        self.rng = rng
        self._pending: dict[int, tuple[bytes, bytes]] = {}
        self.forged = 0

    def _server_key(self) -> bytes | None:
        for (entity, kind), material in self.knowledge.keys.items():
            if kind == "transport" and isinstance(material, dict) and self.rs_base in material:
                return material[self.rs_base]
        return None

    def intercept(self, msg: Message) -> list[bytes | None]:
        if msg.kind != SERVER_AUTH or msg.base != self.rs_base:
            return [msg.data]
        key = self._server_key()
        if key is None:
            return [msg.data]
        if msg.direction == "request":
            try:
                plain, k_resp = kem_open_request(key, msg.data)
            except ValueError:
                return [msg.data]
            self.knowledge.learn(plain, "revealed transport key")
            self._pending[id(msg)] = (plain, k_resp)
            return [msg.data]
        if msg.request is None or id(msg.request) not in self._pending:
            return [msg.data]
        plain, k_resp = self._pending.pop(id(msg.request))
        forged = self._forge(plain)
        if forged is None:
            return [msg.data]
        self.forged += 1
        self.log.append("replaced certificate response")
        return [kem_seal_response(k_resp, forged)]

    def _forge(self, request_bytes: bytes) -> bytes | None:
        try:
            csr = CertificateSigningRequest.from_wire(HttpRequest.parse(request_bytes).json()["csr"])
        except (HttpParseError, KeyError, TypeError, MalformedDocument):
            return None
        details = csr.requested_details
        hsm = SoftHSM(self.rng, "rogue")
        root = CertificateAuthority.create_root(
            self.ca_name, hsm, details.period_start - timedelta(days=365), details.period_end + timedelta(days=365)
        )
        cert = root.issue_certificate(csr, details)
        return json_response(201, {"certificate": cert.to_wire(), "chain": root.chain.to_wire()}).to_bytes()


class SessionSwapAttacker:
    """Starts its own device flow with the OEM client id and phishes its user code."""

    def __init__(self, transport, client_id: str, as_base: str, details: AuthorizationDetails) -> None:
        self.transport = transport
        self.client_id = client_id
        self.as_base = as_base
        self.details = details
        self.device_code: str | None = None
        self.user_code: str | None = None
        self.verification_uri_complete: str | None = None
        self.outcomes: list[str] = []

    def start(self) -> str:
        request = form_request(
            path_of(self.as_base, "/device_authorization"),
            {
                "client_id": self.client_id,
                "scope": PROVISIONING_SCOPE,
                "authorization_details": json.dumps(details_list_to_wire(self.details), sort_keys=True, separators=(",", ":")),
            },
            host=host_of(self.as_base),
        )
        body = self.transport(self.as_base, request).json()
        self.device_code = body["device_code"]
        self.user_code = body["user_code"]
        self.verification_uri_complete = body["verification_uri_complete"]
        return self.user_code

    def poll(self) -> str:
        request = form_request(
            path_of(self.as_base, "/token"),
            {"grant_type": DEVICE_CODE_GRANT_TYPE, "device_code": self.device_code or "", "client_id": self.client_id},
            host=host_of(self.as_base),
        )
        response = self.transport(self.as_base, request)
        outcome = "token" if response.status == 200 else response.json().get("error", "error")
        self.outcomes.append(outcome)
        return outcome


def tamper(details: AuthorizationDetails, field_name: str) -> AuthorizationDetails:
    """Change one field while keeping the request acceptable to the AS."""
    if field_name == "period_start":
        return replace(details, period_start=details.period_start - timedelta(days=1))
    if field_name == "period_end":
        return replace(details, period_end=details.period_end + timedelta(days=30))
    if field_name == "max_period_expenses":
        period = details.max_period_expenses
        return replace(details, max_period_expenses=Money(period.cents + 10_000, period.currency))
    if field_name == "max_daily_expenses":
        daily, period = details.max_daily_expenses, details.max_period_expenses
        cents = daily.cents + 100 if daily.cents + 100 <= period.cents else daily.cents - 1
        return replace(details, max_daily_expenses=Money(cents, daily.currency))
    raise ValueError(f"unknown field {field_name!r}")


class MaliciousVehicle(ElectricVehicle):
    """Vehicle that inflates the contract before forwarding it to the EMSP."""

    def __init__(self, *args: Any, tamper_field: str = "max_period_expenses", **kwargs: Any) -> None:
        if tamper_field not in TAMPER_FIELDS:
            raise ValueError(f"tamper_field must be one of {TAMPER_FIELDS}")
        super().__init__(*args, **kwargs)
        self.tamper_field = tamper_field

    def _forward_details(self, details: AuthorizationDetails) -> AuthorizationDetails:
        return tamper(details, self.tamper_field)
