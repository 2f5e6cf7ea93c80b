"""The vehicle: device-flow client, HSM-backed credential holder, PnC responder.

The vehicle serves the paired user agent (EMSP list, provisioning request),
runs the device authorization flow against the chosen EMSP, installs the
contract certificate, and then answers charge point challenges and signs
meter receipts with its contract key.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from typing import Any, Callable, Protocol

from .core.canonical import b64url_decode, b64url_encode, canonical_encode
from .core.events import EventSink, NullSink, payload_digest
from .core.httpwire import (
    HttpParseError,
    HttpRequest,
    HttpResponse,
    Transport,
    TransportError,
    form_request,
    host_of,
    json_request,
    json_response,
    path_of,
)
from .core.model import (
    DEVICE_CODE_GRANT_TYPE,
    PROVISIONING_SCOPE,
    AuthorizationDetails,
    Money,
    Scope,
    UserCode,
    check_identifier,
    details_from_list,
    details_list_to_wire,
    format_timestamp,
    parse_timestamp,
    to_utc,
    validate_authorization_details,
)
from .core.runtime import Clock, RandomSource, SystemClock, SystemRandomSource
from .chargepoint import MeterReceipt, PncAnswer, challenge_bytes
from .pairing import OOB_DIGITS, PairingError, PairingOffer, PairingResponder, SecureSession
from .pki import (
    DEFAULT_ALGORITHM,
    Certificate,
    CertificateChain,
    KeyHandle,
    MalformedDocument,
    Signature,
    SoftHSM,
    build_csr,
    validate_chain,
    verify_signature,
)
from .tokens import AccessToken, MalformedToken

log = logging.getLogger(__name__)

CERTIFICATE_PATH = "/contract_certificate"
DEFAULT_SLOW_DOWN_STEP = 5

BLE_PAIRING = b"P"
BLE_SECURE = b"S"
BLE_ERROR = b"E"


class EvState(str, Enum):
    IDLE = "Idle"
    PAIRED = "Paired"
    AWAITING_USER_CONFIG = "AwaitingUserConfig"
    AUTHORIZATION_PENDING = "AuthorizationPending"
    TOKEN_HELD = "TokenHeld"
    CREDENTIALED = "Credentialed"


class PollOutcome(str, Enum):
    PENDING = "authorization_pending"
    SLOW_DOWN = "slow_down"
    TOKEN = "token"
    DENIED = "access_denied"
    EXPIRED = "expired_token"
    UNREACHABLE = "unreachable"
    TOO_EARLY = "too_early"


class EvError(Exception):
    """Failure reported to the user agent; ``code`` is the wire error name."""

    def __init__(self, code: str, description: str = "", status: int = 400, detail: Any = None) -> None:
        super().__init__(f"{code}: {description}" if description else code)
        self.code = code
        self.description = description
        self.status = status
        self.detail = detail

    def to_response(self) -> HttpResponse:
        body: dict[str, Any] = {"error": self.code}
        if self.description:
            body["error_description"] = self.description
        if self.detail is not None:
            body["upstream"] = self.detail
        return json_response(self.status, body)


class AuthorizationDenied(EvError):
    pass


class AuthorizationExpired(EvError):
    pass


class Scheduler(Protocol):
    def call_later(self, delay: float, fn: Callable[[], None], label: str = "") -> None: ...


@dataclass(frozen=True)
class EmspDescriptor:
    emsp_id: str
    display_name: str
    as_base: str
    rs_base: str

    def to_wire(self) -> dict[str, str]:
        return {
            "emsp_id": self.emsp_id,
            "display_name": self.display_name,
            "as_base": self.as_base,
            "rs_base": self.rs_base,
        }

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "EmspDescriptor":
        return cls(check_identifier(obj["emsp_id"], "EMSP id"), obj["display_name"], obj["as_base"], obj["rs_base"])


@dataclass
class PendingAuthorization:
    emsp: EmspDescriptor
    details: AuthorizationDetails
    device_code: str
    user_code: UserCode
    verification_uri: str
    verification_uri_complete: str
    interval: int
    deadline: datetime
    last_poll_at: datetime | None = None
    polls: int = 0
    poll_times: list[datetime] = field(default_factory=list)


class ElectricVehicle:
    def __init__(
        self,
        ev_id: str,
        client_id: str,
        directory: list[EmspDescriptor],
        *,
        hsm: SoftHSM,
        transport: Transport,
        trust_roots: dict[str, Certificate] | None = None,
        clock: Clock | None = None,
        rng: RandomSource | None = None,
        events: EventSink | None = None,
        scheduler: Scheduler | None = None,
        display: Callable[[str], None] | None = None,
        scope: Scope = Scope.of(PROVISIONING_SCOPE),
        key_alg: str = DEFAULT_ALGORITHM,
        oob_digits: int = OOB_DIGITS,
        validate_chains: bool = True,
        auto_acquire: bool = True,
    ) -> None:
        self.ev_id = check_identifier(ev_id, "EV id")
        self.client_id = check_identifier(client_id, "client id")
        self.directory = list(directory)
        self.trust_roots = dict(trust_roots or {})
        self.hsm = hsm
        self.transport = transport
        self.clock = clock or SystemClock()
        self.rng = rng or SystemRandomSource()
        self.events = events if events is not None else NullSink()
        self.scheduler = scheduler
        self._display = display
        self.scope = scope
        self.key_alg = key_alg
        self.oob_digits = oob_digits
        # Mutation switch for oracle-sensitivity tests; never disable in deployments.
        self.validate_chains = validate_chains
        self.auto_acquire = auto_acquire

        self.state = EvState.IDLE
        self.display_lines: list[str] = []
        self.pending: PendingAuthorization | None = None
        self.token: AccessToken | None = None
        self.token_emsp: EmspDescriptor | None = None
        self.certificate: Certificate | None = None
        self.chain: CertificateChain | None = None
        self.contract_key: KeyHandle | None = None
        self.last_error: EvError | None = None
        self.paired_session: SecureSession | None = None
        self._offer: PairingOffer | None = None
        self._responder: PairingResponder | None = None
        self._receipts: dict[str, int] = {}

    # -- display -----------------------------------------------------------

    def show(self, text: str) -> None:
        self.display_lines.append(text)
        log.info("[%s display] %s", self.ev_id, text)
        if self._display is not None:
            self._display(text)

    @property
    def displayed_user_code(self) -> str | None:
        for line in reversed(self.display_lines):
            if line.startswith("USER CODE: "):
                return line[len("USER CODE: "):]
        return None

    def _at_least(self, state: EvState) -> bool:
        order = list(EvState)
        return order.index(self.state) >= order.index(state)

    def _emsp(self, emsp_id: str) -> EmspDescriptor:
        for emsp in self.directory:
            if emsp.emsp_id == emsp_id:
                return emsp
        raise EvError("unknown_emsp", f"{emsp_id!r} is not in the vehicle's EMSP list")

    # -- pairing -----------------------------------------------------------

    def offer_pairing(self, address: str = "") -> PairingOffer:
        """Show a fresh QR code; each code admits a single pairing attempt."""
        self._offer = PairingOffer.generate(self.ev_id, self.rng, self.oob_digits, address)
        self._responder = PairingResponder(self._offer.oob_code, self.rng)
        self.show("QR: " + self._offer.to_qr())
        return self._offer

    def pairing_respond(self, hello: Any) -> dict[str, str]:
        if self._responder is None:
            raise PairingError("no pairing offer active")
        return self._responder.respond(hello)

    def pairing_finish(self, msg: Any) -> None:
        responder, self._responder, self._offer = self._responder, None, None
        if responder is None:
            raise PairingError("no pairing offer active")
        self.paired_session = responder.finish(msg)
        if self.state is EvState.IDLE:
            self.state = EvState.PAIRED
        self.events.note(self.ev_id, "paired")

    def handle_paired_frame(self, frame: bytes) -> bytes:
        """Decrypt a request from the paired user agent and return the sealed response."""
        if self.paired_session is None:
            raise PairingError("not paired")
        request = HttpRequest.parse(self.paired_session.open(frame))
        return self.paired_session.seal(self.handle(request).to_bytes())

    def handle_ble(self, data: bytes) -> bytes:
        """Entry point for the short-range link.

        Frames start with one type byte: ``P`` for the plaintext pairing
        handshake, ``S`` for records under the paired session. Errors come
        back as ``E`` frames.
        """
        kind, payload = data[:1], data[1:]
        try:
            if kind == BLE_PAIRING:
                msg = json.loads(payload.decode("utf-8"))
                step = msg.get("step") if isinstance(msg, dict) else None
                if step == "hello":
                    return BLE_PAIRING + canonical_encode(self.pairing_respond(msg))
                if step == "finish":
                    self.pairing_finish(msg)
                    return BLE_PAIRING + canonical_encode({"status": "paired"})
                raise PairingError("unknown pairing step")
            if kind == BLE_SECURE:
                return BLE_SECURE + self.handle_paired_frame(payload)
            raise PairingError("unknown frame type")
        except (PairingError, HttpParseError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            return BLE_ERROR + str(exc).encode("utf-8")

    # -- user-agent facing API --------------------------------------------

    def handle(self, request: HttpRequest) -> HttpResponse:
        try:
            if (request.method, request.path) == ("GET", "/emsps"):
                return json_response(200, self.serve_emsp_list())
            if (request.method, request.path) == ("GET", "/status"):
                return json_response(200, {"state": self.state.value, "user_code": self.displayed_user_code})
            if (request.method, request.path) == ("POST", "/provision"):
                body = request.json()
                if not isinstance(body, dict) or not isinstance(body.get("emsp_id"), str):
                    raise EvError("invalid_request", "emsp_id missing")
                try:
                    details = details_from_list(body.get("authorization_details"))
                except ValueError as exc:
                    raise EvError("invalid_authorization_details", str(exc)) from None
                return json_response(200, self.handle_provisioning_request(body["emsp_id"], details))
            return json_response(404, {"error": "not_found"})
        except EvError as exc:
            self.last_error = exc
            self.events.note(self.ev_id, "error", code=exc.code)
            return exc.to_response()
        except HttpParseError as exc:
            return EvError("invalid_request", str(exc)).to_response()

    def serve_emsp_list(self) -> list[dict[str, str]]:
        if not self._at_least(EvState.PAIRED):
            raise EvError("not_paired", status=403)
        return [emsp.to_wire() for emsp in self.directory]

    def handle_provisioning_request(self, emsp_id: str, details: AuthorizationDetails) -> dict[str, Any]:
        if self.state not in (EvState.PAIRED, EvState.AWAITING_USER_CONFIG):
            raise EvError("invalid_state", f"cannot provision while {self.state.value}", status=409)
        emsp = self._emsp(emsp_id)
        now = self.clock.now()
        result = validate_authorization_details(details, now)
        if not result.ok:
            raise EvError("invalid_authorization_details", "; ".join(result.violations))
        self.state = EvState.AWAITING_USER_CONFIG
        self.events.note(self.ev_id, "details_received", digest=payload_digest(details.canonical()))
        forwarded = self._forward_details(details)
        self.events.note(self.ev_id, "details_forwarded", digest=payload_digest(forwarded.canonical()))
        request = form_request(
            path_of(emsp.as_base, "/device_authorization"),
            {
                "client_id": self.client_id,
                "scope": str(self.scope),
                "authorization_details": json.dumps(details_list_to_wire(forwarded), separators=(",", ":"), sort_keys=True),
            },
            host=host_of(emsp.as_base),
        )
        try:
            response = self.transport(emsp.as_base, request)
            body = response.json()
        except (TransportError, HttpParseError) as exc:
            self.state = EvState.PAIRED
            raise EvError("as_unreachable", str(exc), status=502) from None
        if response.status != 200:
            self.state = EvState.PAIRED
            raise EvError("authorization_server_error", status=502, detail=body)
        try:
            user_code = UserCode(body["user_code"])
            pending = PendingAuthorization(
                emsp=emsp,
                details=forwarded,
                device_code=body["device_code"],
                user_code=user_code,
                verification_uri=body["verification_uri"],
                verification_uri_complete=body.get("verification_uri_complete", ""),
                interval=int(body.get("interval", 5)),
                deadline=now + timedelta(seconds=int(body["expires_in"])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            self.state = EvState.PAIRED
            raise EvError("authorization_server_error", f"malformed response: {exc}", status=502) from None
        self.pending = pending
        self.state = EvState.AUTHORIZATION_PENDING
        self.show(f"USER CODE: {user_code.display}")
        self.events.running("token", self.client_id, emsp.emsp_id, pending.device_code.encode("ascii"))
        if self.scheduler is not None:
            self.scheduler.call_later(pending.interval, self._scheduled_poll, f"{self.ev_id}:poll")
        return {
            "user_code": user_code.display,
            "verification_uri": pending.verification_uri,
            "verification_uri_complete": pending.verification_uri_complete,
        }

    def _forward_details(self, details: AuthorizationDetails) -> AuthorizationDetails:
        return details

    # -- polling -------------------------------------------------------------

    def poll_once(self) -> PollOutcome:
        """Send one device access token request, honouring the current interval."""
        pending = self.pending
        if self.state is not EvState.AUTHORIZATION_PENDING or pending is None:
            raise EvError("invalid_state", "no authorization pending", status=409)
        now = self.clock.now()
        if now > pending.deadline:
            self._abandon("expired")
            return PollOutcome.EXPIRED
        if pending.last_poll_at is not None and (now - pending.last_poll_at).total_seconds() < pending.interval:
            return PollOutcome.TOO_EARLY
        pending.last_poll_at = now
        pending.polls += 1
        pending.poll_times.append(now)
        request = form_request(
            path_of(pending.emsp.as_base, "/token"),
            {"grant_type": DEVICE_CODE_GRANT_TYPE, "device_code": pending.device_code, "client_id": self.client_id},
            host=host_of(pending.emsp.as_base),
        )
        try:
            response = self.transport(pending.emsp.as_base, request)
            body = response.json()
        except (TransportError, HttpParseError):
            return PollOutcome.UNREACHABLE
        if response.status == 200:
            try:
                token = AccessToken.from_wire(body["access_token"])
            except (KeyError, TypeError, MalformedToken):
                return PollOutcome.UNREACHABLE
            self.token = token
            self.token_emsp = pending.emsp
            self.state = EvState.TOKEN_HELD
            self.events.note(self.ev_id, "token_received", jti=token.token_id)
            return PollOutcome.TOKEN
        error = body.get("error") if isinstance(body, dict) else None
        if error == "authorization_pending":
            return PollOutcome.PENDING
        if error == "slow_down":
            pending.interval = max(pending.interval + DEFAULT_SLOW_DOWN_STEP, int(body.get("interval", 0)))
            return PollOutcome.SLOW_DOWN
        if error == "access_denied":
            self._abandon("denied")
            return PollOutcome.DENIED
        if error == "expired_token":
            self._abandon("expired")
            return PollOutcome.EXPIRED
        self._abandon(str(error))
        return PollOutcome.EXPIRED

    def _abandon(self, why: str) -> None:
        self.pending = None
        self.state = EvState.PAIRED
        self.events.note(self.ev_id, "authorization_abandoned", reason=why)
        self.show(f"AUTHORIZATION {why.upper()}")

    def _scheduled_poll(self) -> None:
        if self.state is not EvState.AUTHORIZATION_PENDING or self.pending is None:
            return
        outcome = self.poll_once()
        if outcome is PollOutcome.TOKEN:
            if self.auto_acquire:
                try:
                    self.acquire_contract_certificate()
                except EvError as exc:
                    self.last_error = exc
                    self.events.note(self.ev_id, "error", code=exc.code)
                    log.warning("certificate acquisition failed: %s", exc)
            return
        if self.pending is not None and self.scheduler is not None:
            self.scheduler.call_later(self.pending.interval, self._scheduled_poll, f"{self.ev_id}:poll")

    def poll_until_token(self, interval_override: int | None = None) -> AccessToken:
        """Blocking poll loop; sleeps on the vehicle's clock between requests."""
        while True:
            pending = self.pending
            if pending is None:
                raise EvError("invalid_state", "no authorization pending", status=409)
            if interval_override is not None:
                pending.interval = max(pending.interval, interval_override)
            outcome = self.poll_once()
            if outcome is PollOutcome.TOKEN:
                assert self.token is not None
                return self.token
            if outcome is PollOutcome.DENIED:
                raise AuthorizationDenied("access_denied")
            if outcome is PollOutcome.EXPIRED:
                raise AuthorizationExpired("expired_token")
            if outcome is PollOutcome.TOO_EARLY and pending.last_poll_at is not None:
                wait = pending.interval - (self.clock.now() - pending.last_poll_at).total_seconds()
            else:
                wait = pending.interval
            self.clock.sleep(max(wait, 0))

    # -- certificate installation -----------------------------------------

    def acquire_contract_certificate(self) -> Certificate:
        if self.state is not EvState.TOKEN_HELD or self.token is None or self.token_emsp is None:
            raise EvError("invalid_state", "no access token held", status=409)
        token, emsp = self.token, self.token_emsp
        handle = self.hsm.generate_keypair(self.key_alg)
        csr = build_csr(self.hsm, handle, self.ev_id, token.authorization_details)
        self.events.running("install_request", self.ev_id, emsp.emsp_id, handle.public_key)
        request = json_request(
            "POST",
            path_of(emsp.rs_base, CERTIFICATE_PATH),
            {"csr": csr.to_wire()},
            host=host_of(emsp.rs_base),
            headers=[("Authorization", f"Bearer {token.to_wire()}")],
        )
        try:
            response = self.transport(emsp.rs_base, request)
            body = response.json()
        except (TransportError, HttpParseError) as exc:
            raise EvError("rs_unreachable", str(exc), status=502) from None
        if response.status != 201:
            error = body.get("error", "rs_error") if isinstance(body, dict) else "rs_error"
            raise EvError(error, body.get("error_description", "") if isinstance(body, dict) else "", status=response.status, detail=body)
        try:
            cert = Certificate.from_wire(body["certificate"])
            chain = CertificateChain.from_wire(body["chain"])
        except (KeyError, TypeError, MalformedDocument) as exc:
            raise EvError("certificate_rejected", f"malformed response: {exc}", status=502) from None
        if self.validate_chains:
            self._check_certificate(cert, chain, handle, token, emsp)
        self.certificate, self.chain, self.contract_key = cert, chain, handle
        self.state = EvState.CREDENTIALED
        self.events.commit("install_response", self.ev_id, emsp.emsp_id, cert.to_wire().encode("ascii"))
        self.events.note(self.ev_id, "credentialed", serial=cert.serial)
        self.show(f"CONTRACT INSTALLED: {emsp.display_name}")
        return cert

    def _check_certificate(
        self, cert: Certificate, chain: CertificateChain, handle: KeyHandle, token: AccessToken, emsp: EmspDescriptor
    ) -> None:
        root = self.trust_roots.get(emsp.emsp_id)
        if root is None:
            raise EvError("certificate_rejected", "no trust root configured for EMSP", status=502)
        problems = []
        if cert.public_key != handle.public_key or cert.subject != self.ev_id:
            problems.append("certificate does not bind our key")
        if cert.constraints is None or cert.constraints.canonical() != token.authorization_details.canonical():
            problems.append("constraints differ from granted details")
        verdict = validate_chain(cert, chain, root, self.clock.now())
        if not verdict.ok and verdict.reason == "expired" and cert.not_before > self.clock.now() and chain.issuing.valid_at(self.clock.now()):
            # Contracts whose period starts later are installed ahead of time.
            verdict = validate_chain(cert, chain, root, cert.not_before)
        if not verdict.ok:
            problems.append(f"chain validation: {verdict.reason}")
        if problems:
            self.events.mismatch(self.ev_id, "; ".join(problems))
            raise EvError("certificate_rejected", "; ".join(problems), status=502)

    # -- Plug and Charge ---------------------------------------------------

    def _require_credentials(self) -> tuple[Certificate, CertificateChain, KeyHandle]:
        if self.state is not EvState.CREDENTIALED or self.certificate is None or self.chain is None or self.contract_key is None:
            raise EvError("no_credentials", status=409)
        return self.certificate, self.chain, self.contract_key

    def pnc_answer_challenge(self, nonce: bytes) -> PncAnswer:
        cert, chain, key = self._require_credentials()
        return PncAnswer(cert, chain, self._sign_with_contract_key(key, challenge_bytes(nonce, cert.serial)))

    def _sign_with_contract_key(self, key: KeyHandle, message: bytes) -> Signature:
        return self.hsm.sign(key, message)

    def sign_meter_receipt(self, session_id: str, cumulative_wh: int, price: Money, ts: datetime) -> MeterReceipt:
        cert, _, key = self._require_credentials()
        previous = self._receipts.get(session_id)
        if cumulative_wh < 0 or (previous is not None and cumulative_wh < previous):
            raise EvError("non_monotonic", f"meter reading {cumulative_wh} Wh is below {previous} Wh")
        unsigned = MeterReceipt(session_id, cumulative_wh, price, to_utc(ts), cert.serial, Signature(key.algorithm_id, b""))
        receipt = MeterReceipt(
            session_id, cumulative_wh, price, to_utc(ts), cert.serial, self._sign_with_contract_key(key, unsigned.signed_bytes())
        )
        self._receipts[session_id] = cumulative_wh
        return receipt

    def pnc_authenticate(self, cp_base: str) -> dict[str, Any]:
        """Run challenge-response against a charge point reachable through the transport."""
        self._require_credentials()
        host = host_of(cp_base)
        try:
            response = self.transport(cp_base, json_request("POST", path_of(cp_base, "/pnc/challenge"), {}, host=host))
            nonce = b64url_decode(response.json()["challenge"])
            answer = self.pnc_answer_challenge(nonce)
            response = self.transport(
                cp_base,
                json_request(
                    "POST", path_of(cp_base, "/pnc/authorize"), {"challenge": b64url_encode(nonce), **answer.to_wire()}, host=host
                ),
            )
            return {"status": response.status, **response.json()}
        except (TransportError, HttpParseError, KeyError, TypeError, ValueError) as exc:
            raise EvError("cp_unreachable", str(exc), status=502) from None

    def send_meter_receipt(self, cp_base: str, receipt: MeterReceipt) -> dict[str, Any]:
        try:
            response = self.transport(
                cp_base, json_request("POST", path_of(cp_base, "/pnc/meter_receipt"), {"receipt": receipt.to_wire()}, host=host_of(cp_base))
            )
            return {"status": response.status, **response.json()}
        except (TransportError, HttpParseError) as exc:
            raise EvError("cp_unreachable", str(exc), status=502) from None

