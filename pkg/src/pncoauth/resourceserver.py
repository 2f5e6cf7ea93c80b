"""EMSP resource server: the contract-certificate CA behind an OAuth bearer check."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime
from typing import Any

from .core.events import EventSink, NullSink
from .core.httpwire import HttpRequest, HttpResponse, HttpParseError, json_response
from .core.model import PROVISIONING_SCOPE, Scope, to_utc
from .core.runtime import Clock, SystemClock
from .pki import (
    Certificate,
    CertificateAuthority,
    CertificateChain,
    CertificateSigningRequest,
    MalformedDocument,
    verify_csr,
)
from .tokens import AccessToken, MalformedToken

log = logging.getLogger(__name__)

INVALID_TOKEN = "invalid_token"
INSUFFICIENT_SCOPE = "insufficient_scope"
INVALID_CSR = "invalid_csr"
DETAILS_MISMATCH = "details_mismatch"

CERTIFICATE_PATH = "/contract_certificate"


class ResourceError(Exception):
    def __init__(self, error: str, status: int, description: str = "") -> None:
        super().__init__(f"{error}: {description}" if description else error)
        self.error = error
        self.status = status
        self.description = description

    def to_response(self) -> HttpResponse:
        body: dict[str, Any] = {"error": self.error}
        if self.description:
            body["error_description"] = self.description
        headers = []
        if self.status in (401, 403):
            headers.append(("WWW-Authenticate", f'Bearer error="{self.error}"'))
        return json_response(self.status, body, headers)


@dataclass(frozen=True)
class ResourceServerConfig:
    emsp_id: str
    as_issuer: str
    as_public_key: bytes
    required_scope: Scope = Scope.of(PROVISIONING_SCOPE)


class ResourceServer:
    """Validates the bearer token and CSR locally, then issues from the CA.

    The only mutable state is the CA's serial counter, so instances are safe
    to share between request threads.
    """

    def __init__(
        self,
        config: ResourceServerConfig,
        ca: CertificateAuthority,
        *,
        clock: Clock | None = None,
        events: EventSink | None = None,
    ) -> None:
        self.config = config
        self.ca = ca
        self.clock = clock or SystemClock()
        self.events = events if events is not None else NullSink()

    def validate_token(self, token_wire: str, now: datetime) -> AccessToken:
        try:
            token = AccessToken.from_wire(token_wire)
        except MalformedToken as exc:
            raise ResourceError(INVALID_TOKEN, 401, str(exc)) from None
        if not token.verify(self.config.as_public_key) or token.issuer != self.config.as_issuer:
            raise ResourceError(INVALID_TOKEN, 401, "signature or issuer check failed")
        if token.is_expired(now):
            raise ResourceError(INVALID_TOKEN, 401, "token expired")
        if not token.scope.covers(self.config.required_scope):
            raise ResourceError(INSUFFICIENT_SCOPE, 403, f"requires {self.config.required_scope}")
        return token

    def handle_certificate_request(
        self, token_wire: str, csr_wire: str, now: datetime | None = None
    ) -> tuple[Certificate, CertificateChain]:
        now = to_utc(now) if now is not None else self.clock.now()
        token = self.validate_token(token_wire, now)
        try:
            csr = CertificateSigningRequest.from_wire(csr_wire)
        except MalformedDocument as exc:
            raise ResourceError(INVALID_CSR, 400, str(exc)) from None
        if not verify_csr(csr):
            raise ResourceError(INVALID_CSR, 400, "proof of possession failed")
        granted = token.authorization_details
        if csr.requested_details.canonical() != granted.canonical():
            raise ResourceError(DETAILS_MISMATCH, 400, "CSR details differ from the granted details")
        cert = self.ca.issue_certificate(csr, granted)
        emsp = self.config.emsp_id
        self.events.commit("install_request", emsp, csr.subject_ev_id, csr.public_key)
        self.events.running("install_response", emsp, csr.subject_ev_id, cert.to_wire().encode("ascii"))
        self.events.note(emsp, "certificate_issued", serial=cert.serial, subject=cert.subject, jti=token.token_id)
        return cert, self.ca.chain

    def handle(self, request: HttpRequest) -> HttpResponse:
        if (request.method, request.path) != ("POST", CERTIFICATE_PATH):
            return json_response(404, {"error": "not_found"})
        try:
            auth = request.header("Authorization") or ""
            scheme, _, token_wire = auth.partition(" ")
            if scheme != "Bearer" or not token_wire:
                raise ResourceError(INVALID_TOKEN, 401, "bearer token required")
            try:
                body = request.json()
            except HttpParseError:
                raise ResourceError(INVALID_CSR, 400, "body must be JSON") from None
            if not isinstance(body, dict) or not isinstance(body.get("csr"), str):
                raise ResourceError(INVALID_CSR, 400, "body must carry a csr string")
            cert, chain = self.handle_certificate_request(token_wire, body["csr"])
        except ResourceError as exc:
            return exc.to_response()
        return json_response(201, {"certificate": cert.to_wire(), "chain": chain.to_wire()})
