"""Signed structured access tokens (header.payload.signature, base64url parts)."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Any

from .core.canonical import CanonicalError, b64url_decode, b64url_encode, canonical_decode, canonical_encode
from .core.model import AuthorizationDetails, Scope, format_timestamp, parse_timestamp, to_utc
from .pki import Signature, verify_signature

TOKEN_TYPE = "at+pnc"


class MalformedToken(ValueError):
    pass


@dataclass(frozen=True)
class AccessToken:
    alg: str
    issuer: str
    subject: str
    client_id: str
    scope: Scope
    authorization_details: AuthorizationDetails
    issued_at: datetime
    expires_at: datetime
    token_id: str
    signature: bytes = b""

    def header(self) -> dict[str, Any]:
        return {"alg": self.alg, "typ": TOKEN_TYPE}

    def payload(self) -> dict[str, Any]:
        return {
            "iss": self.issuer,
            "sub": self.subject,
            "client_id": self.client_id,
            "scope": str(self.scope),
            "authorization_details": [self.authorization_details.to_wire()],
            "iat": format_timestamp(self.issued_at),
            "exp": format_timestamp(self.expires_at),
            "jti": self.token_id,
        }

    def signing_input(self) -> bytes:
        return (
            b64url_encode(canonical_encode(self.header()))
            + "."
            + b64url_encode(canonical_encode(self.payload()))
        ).encode("ascii")

    def to_wire(self) -> str:
        return self.signing_input().decode("ascii") + "." + b64url_encode(self.signature)

    def verify(self, public_key: bytes) -> bool:
        return verify_signature(public_key, self.signing_input(), Signature(self.alg, self.signature))

    def is_expired(self, now: datetime) -> bool:
        return to_utc(now) >= self.expires_at

    @classmethod
    def from_wire(cls, text: str) -> "AccessToken":
        if not isinstance(text, str) or text.count(".") != 2:
            raise MalformedToken("token must have three dot-separated parts")
        h, p, s = text.split(".")
        try:
            header = canonical_decode(b64url_decode(h))
            payload = canonical_decode(b64url_decode(p))
            signature = b64url_decode(s)
        except (CanonicalError, ValueError) as exc:
            raise MalformedToken(str(exc)) from None
        if not isinstance(header, dict) or header.get("typ") != TOKEN_TYPE or not isinstance(header.get("alg"), str):
            raise MalformedToken("bad token header")
        if not isinstance(payload, dict):
            raise MalformedToken("bad token payload")
        try:
            details = payload["authorization_details"]
            if not isinstance(details, list) or len(details) != 1:
                raise ValueError("exactly one authorization details entry expected")
            token = cls(
                alg=header["alg"],
                issuer=payload["iss"],
                subject=payload["sub"],
                client_id=payload["client_id"],
                scope=Scope.parse(payload["scope"]),
                authorization_details=AuthorizationDetails.from_wire(details[0]),
                issued_at=parse_timestamp(payload["iat"]),
                expires_at=parse_timestamp(payload["exp"]),
                token_id=payload["jti"],
                signature=signature,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedToken(f"bad token payload: {exc}") from None
        if token.header() != header or token.payload() != payload:
            raise MalformedToken("token carries unexpected members")
        return token
