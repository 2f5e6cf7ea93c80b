"""Keys, signatures, certificate signing requests, certificates and chains.

Private keys live inside :class:`SoftHSM` and never leave it; callers hold
:class:`KeyHandle` objects that expose only the public half. All signed
documents are canonical JSON bodies signed over their canonical bytes and
serialized as ``base64url(body) "." base64url(signature)``.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519

from .core.canonical import (
    CanonicalError,
    b64url_decode,
    b64url_encode,
    canonical_decode,
    canonical_encode,
)
from .core.model import (
    AuthorizationDetails,
    check_identifier,
    format_timestamp,
    invariant_violations,
    parse_timestamp,
    to_utc,
)
from .core.runtime import RandomSource, SystemRandomSource

DEFAULT_ALGORITHM = "ed25519"
ALGORITHM_ALIASES = {"default-ec": DEFAULT_ALGORITHM}
MAX_INTERMEDIATES = 2
MAX_SERIAL = 2**64 - 1
CERTIFICATE_SUFFIX = ".pncc"

# validate_chain failure reasons
BAD_SIGNATURE = "bad-signature"
EXPIRED = "expired"
UNTRUSTED_ROOT = "untrusted-root"
PATH_TOO_LONG = "path-too-long"


class PkiError(Exception):
    pass


class UnsupportedAlgorithm(PkiError):
    pass


class UnknownKeyHandle(PkiError):
    pass


class PopFailure(PkiError):
    """The CSR's self-signature does not verify under its own public key."""


class DetailsMismatch(PkiError):
    pass


class MalformedDocument(PkiError):
    pass


# -- signature schemes -----------------------------------------------------


class SignatureScheme:
    algorithm_id: str

    def private_from_seed(self, seed: bytes) -> Any:
        raise NotImplementedError

    def public_bytes(self, private_key: Any) -> bytes:
        raise NotImplementedError

    def sign(self, private_key: Any, message: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        raise NotImplementedError


class Ed25519Scheme(SignatureScheme):
    algorithm_id = "ed25519"

    def private_from_seed(self, seed: bytes) -> Any:
        return ed25519.Ed25519PrivateKey.from_private_bytes(seed[:32])

    def public_bytes(self, private_key: Any) -> bytes:
        return private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    def sign(self, private_key: Any, message: bytes) -> bytes:
        return private_key.sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


class EcdsaScheme(SignatureScheme):
    """ECDSA with RFC 6979 deterministic nonces."""

    def __init__(self, algorithm_id: str, curve: ec.EllipticCurve, digest: hashes.HashAlgorithm):
        self.algorithm_id = algorithm_id
        self._curve = curve
        self._digest = digest
        self._order_bytes = (curve.key_size + 7) // 8 + 8

    def private_from_seed(self, seed: bytes) -> Any:
        material = hashlib.shake_256(seed).digest(self._order_bytes)
        # Reduction bias is irrelevant at 64 spare bits.
        value = int.from_bytes(material, "big") % (2**self._curve.key_size - 2) + 1
        return ec.derive_private_key(value, self._curve)

    def public_bytes(self, private_key: Any) -> bytes:
        return private_key.public_key().public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
        )

    def sign(self, private_key: Any, message: bytes) -> bytes:
        return private_key.sign(message, ec.ECDSA(self._digest, deterministic_signing=True))

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            key = ec.EllipticCurvePublicKey.from_encoded_point(self._curve, public_key)
            key.verify(signature, message, ec.ECDSA(self._digest))
        except (InvalidSignature, ValueError, TypeError):
            return False
        return True


_SCHEMES: dict[str, SignatureScheme] = {}


def register_scheme(scheme: SignatureScheme) -> None:
    _SCHEMES[scheme.algorithm_id] = scheme


def resolve_algorithm(alg: str) -> str:
    alg = ALGORITHM_ALIASES.get(alg, alg)
    if alg not in _SCHEMES:
        raise UnsupportedAlgorithm(f"unsupported signature algorithm {alg!r}")
    return alg


def supported_algorithms() -> list[str]:
    return sorted(_SCHEMES)


register_scheme(Ed25519Scheme())
register_scheme(EcdsaScheme("ecdsa-p256-sha256", ec.SECP256R1(), hashes.SHA256()))
register_scheme(EcdsaScheme("ecdsa-p384-sha384", ec.SECP384R1(), hashes.SHA384()))
register_scheme(EcdsaScheme("ecdsa-p521-sha512", ec.SECP521R1(), hashes.SHA512()))


@dataclass(frozen=True)
class Signature:
    algorithm_id: str
    value: bytes


def verify_signature(public_key: bytes, message: bytes, signature: Signature) -> bool:
    scheme = _SCHEMES.get(signature.algorithm_id)
    if scheme is None:
        return False
    return scheme.verify(public_key, message, signature.value)


# -- HSM -------------------------------------------------------------------


@dataclass(frozen=True)
class KeyHandle:
    """Reference to a key inside an HSM. Carries the public key only."""

    handle_id: str
    algorithm_id: str
    public_key: bytes


class SoftHSM:
    """Software stand-in for the vehicle's (or a server's) hardware security module.

    Keys are created and used in here; the class has no operation that
    returns private key material.
    """

    def __init__(self, rng: RandomSource | None = None, label: str = "hsm") -> None:
        self._rng = rng or SystemRandomSource()
        self._label = label
        self.__keys: dict[str, tuple[SignatureScheme, Any]] = {}
        self._lock = threading.Lock()

    def generate_keypair(self, alg: str = DEFAULT_ALGORITHM) -> KeyHandle:
        scheme = _SCHEMES[resolve_algorithm(alg)]
        with self._lock:
            private = scheme.private_from_seed(self._rng.token_bytes(64))
            handle_id = f"{self._label}:{len(self.__keys) + 1}"
            self.__keys[handle_id] = (scheme, private)
        return KeyHandle(handle_id, scheme.algorithm_id, scheme.public_bytes(private))

    def sign(self, handle: KeyHandle, message: bytes) -> Signature:
        try:
            scheme, private = self.__keys[handle.handle_id]
        except KeyError:
            raise UnknownKeyHandle(handle.handle_id) from None
        if scheme.public_bytes(private) != handle.public_key:
            raise UnknownKeyHandle(handle.handle_id)
        return Signature(scheme.algorithm_id, scheme.sign(private, message))


# -- signed documents ------------------------------------------------------


def _compact(body: dict[str, Any], signature: bytes) -> str:
    return b64url_encode(canonical_encode(body)) + "." + b64url_encode(signature)


def _split_compact(text: str) -> tuple[dict[str, Any], bytes]:
    if not isinstance(text, str) or text.count(".") != 1:
        raise MalformedDocument("expected '<body>.<signature>'")
    body_part, sig_part = text.split(".")
    try:
        body = canonical_decode(b64url_decode(body_part))
        sig = b64url_decode(sig_part)
    except (CanonicalError, ValueError) as exc:
        raise MalformedDocument(str(exc)) from None
    if not isinstance(body, dict):
        raise MalformedDocument("document body must be an object")
    return body, sig


def _field(body: dict[str, Any], name: str, kind: type) -> Any:
    value = body.get(name)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise MalformedDocument(f"missing or invalid field {name!r}")
    return value


@dataclass(frozen=True)
class CertificateSigningRequest:
    subject_ev_id: str
    public_key: bytes
    key_alg: str
    requested_details: AuthorizationDetails
    self_signature: Signature

    def body(self) -> dict[str, Any]:
        return {
            "type": "pnc-csr",
            "subject": self.subject_ev_id,
            "key_alg": self.key_alg,
            "public_key": b64url_encode(self.public_key),
            "requested_details": self.requested_details.to_wire(),
        }

    def signed_bytes(self) -> bytes:
        return canonical_encode(self.body())

    def to_wire(self) -> str:
        return _compact(self.body(), self.self_signature.value)

    def to_envelope(self) -> dict[str, Any]:
        return {"body": self.body(), "sig": b64url_encode(self.self_signature.value), "alg": self.key_alg}

    @classmethod
    def from_wire(cls, text: str) -> "CertificateSigningRequest":
        body, sig = _split_compact(text)
        return cls._from_body(body, sig)

    @classmethod
    def _from_body(cls, body: dict[str, Any], sig: bytes) -> "CertificateSigningRequest":
        if body.get("type") != "pnc-csr":
            raise MalformedDocument("not a certificate signing request")
        try:
            details = AuthorizationDetails.from_wire(body.get("requested_details"))
            public_key = b64url_decode(_field(body, "public_key", str))
        except ValueError as exc:
            raise MalformedDocument(str(exc)) from None
        key_alg = _field(body, "key_alg", str)
        return cls(_field(body, "subject", str), public_key, key_alg, details, Signature(key_alg, sig))


def build_csr(
    hsm: SoftHSM, handle: KeyHandle, ev_id: str, details: AuthorizationDetails
) -> CertificateSigningRequest:
    problems = invariant_violations(details)
    if problems:
        raise ValueError("invalid authorization details: " + ", ".join(problems))
    check_identifier(ev_id, "EV id")
    unsigned = CertificateSigningRequest(
        ev_id, handle.public_key, handle.algorithm_id, details, Signature(handle.algorithm_id, b"")
    )
    signature = hsm.sign(handle, unsigned.signed_bytes())
    return CertificateSigningRequest(ev_id, handle.public_key, handle.algorithm_id, details, signature)


def verify_csr(csr: CertificateSigningRequest) -> bool:
    """Proof of possession: the CSR is signed by the key it asks to certify."""
    if csr.self_signature.algorithm_id != csr.key_alg:
        return False
    return verify_signature(csr.public_key, csr.signed_bytes(), csr.self_signature)


@dataclass(frozen=True)
class Certificate:
    """CA or contract certificate. Contract certificates carry ``constraints``."""

    serial: int
    subject: str
    issuer: str
    public_key: bytes
    key_alg: str
    not_before: datetime
    not_after: datetime
    is_ca: bool
    constraints: AuthorizationDetails | None
    signature: Signature

    def body(self) -> dict[str, Any]:
        body = {
            "type": "pnc-cert",
            "serial": str(self.serial),
            "subject": self.subject,
            "issuer": self.issuer,
            "public_key": b64url_encode(self.public_key),
            "key_alg": self.key_alg,
            "not_before": format_timestamp(self.not_before),
            "not_after": format_timestamp(self.not_after),
            "ca": self.is_ca,
            "sig_alg": self.signature.algorithm_id,
        }
        if self.constraints is not None:
            body["constraints"] = self.constraints.to_wire()
        return body

    def signed_bytes(self) -> bytes:
        return canonical_encode(self.body())

    def to_wire(self) -> str:
        return _compact(self.body(), self.signature.value)

    def to_envelope(self) -> dict[str, Any]:
        return {"body": self.body(), "sig": b64url_encode(self.signature.value), "alg": self.signature.algorithm_id}

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_wire().encode("ascii")).hexdigest()

    def valid_at(self, at: datetime) -> bool:
        return self.not_before <= to_utc(at) <= self.not_after

    @classmethod
    def from_wire(cls, text: str) -> "Certificate":
        body, sig = _split_compact(text)
        return cls._from_body(body, sig)

    @classmethod
    def from_envelope(cls, env: dict[str, Any]) -> "Certificate":
        if not isinstance(env, dict) or set(env) != {"body", "sig", "alg"}:
            raise MalformedDocument("certificate envelope needs body, sig and alg")
        try:
            sig = b64url_decode(env["sig"])
        except ValueError as exc:
            raise MalformedDocument(str(exc)) from None
        cert = cls._from_body(env["body"], sig)
        if cert.signature.algorithm_id != env["alg"]:
            raise MalformedDocument("envelope alg disagrees with body")
        return cert

    @classmethod
    def _from_body(cls, body: Any, sig: bytes) -> "Certificate":
        if not isinstance(body, dict) or body.get("type") != "pnc-cert":
            raise MalformedDocument("not a certificate")
        serial_text = _field(body, "serial", str)
        if not serial_text.isdigit() or int(serial_text) > MAX_SERIAL or str(int(serial_text)) != serial_text:
            raise MalformedDocument("serial must be a decimal 64-bit unsigned integer")
        try:
            constraints = (
                AuthorizationDetails.from_wire(body["constraints"]) if "constraints" in body else None
            )
            public_key = b64url_decode(_field(body, "public_key", str))
            not_before = parse_timestamp(_field(body, "not_before", str))
            not_after = parse_timestamp(_field(body, "not_after", str))
        except ValueError as exc:
            raise MalformedDocument(str(exc)) from None
        cert = cls(
            serial=int(serial_text),
            subject=_field(body, "subject", str),
            issuer=_field(body, "issuer", str),
            public_key=public_key,
            key_alg=_field(body, "key_alg", str),
            not_before=not_before,
            not_after=not_after,
            is_ca=_field(body, "ca", bool),
            constraints=constraints,
            signature=Signature(_field(body, "sig_alg", str), sig),
        )
        if cert.body() != body:
            raise MalformedDocument("certificate has unexpected members")
        return cert


ContractCertificate = Certificate


@dataclass(frozen=True)
class CertificateChain:
    """Self-signed root plus up to two sub-CAs, ordered from the root down."""

    root: Certificate
    intermediates: tuple[Certificate, ...] = ()

    @property
    def issuing(self) -> Certificate:
        return self.intermediates[-1] if self.intermediates else self.root

    def certificates(self) -> list[Certificate]:
        return [self.root, *self.intermediates]

    def to_wire(self) -> list[str]:
        return [c.to_wire() for c in self.certificates()]

    @classmethod
    def from_wire(cls, items: Any) -> "CertificateChain":
        if not isinstance(items, list) or not items:
            raise MalformedDocument("chain must be a non-empty list")
        certs = [Certificate.from_wire(item) for item in items]
        return cls(certs[0], tuple(certs[1:]))


@dataclass(frozen=True)
class ChainValidation:
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.ok


def _issued_by(child: Certificate, parent: Certificate) -> bool:
    return (
        parent.is_ca
        and child.issuer == parent.subject
        and child.signature.algorithm_id == parent.key_alg
        and verify_signature(parent.public_key, child.signed_bytes(), child.signature)
    )


def validate_chain(
    leaf: Certificate, chain: CertificateChain, trust_root: Certificate, at: datetime
) -> ChainValidation:
    """Check ``leaf`` against ``chain`` anchored at ``trust_root`` at time ``at``.

    A time outside any certificate's window, before or after, is reported
    as ``expired``.
    """
    if chain.root.to_wire() != trust_root.to_wire():
        return ChainValidation(UNTRUSTED_ROOT)
    if len(chain.intermediates) > MAX_INTERMEDIATES:
        return ChainValidation(PATH_TOO_LONG)
    path = [chain.root, *chain.intermediates, leaf]
    if not _issued_by(chain.root, chain.root):
        return ChainValidation(BAD_SIGNATURE)
    for parent, child in zip(path, path[1:]):
        if not _issued_by(child, parent):
            return ChainValidation(BAD_SIGNATURE)
    at = to_utc(at)
    if any(not cert.valid_at(at) for cert in path):
        return ChainValidation(EXPIRED)
    return ChainValidation()


# -- certificate authority -------------------------------------------------


class SerialCounter:
    """Monotonic 64-bit serial source, optionally persisted to a text file."""

    def __init__(self, path: str | Path | None = None, last: int = 0) -> None:
        self._path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        if self._path is not None and self._path.exists():
            last = int(self._path.read_text().strip() or 0)
        self._last = last

    def next(self) -> int:
        with self._lock:
            if self._last >= MAX_SERIAL:
                raise PkiError("serial space exhausted")
            self._last += 1
            if self._path is not None:
                fd, tmp = tempfile.mkstemp(dir=self._path.parent)
                with os.fdopen(fd, "w") as fh:
                    fh.write(str(self._last))
                os.replace(tmp, self._path)
            return self._last


class CertificateAuthority:
    def __init__(
        self,
        name: str,
        hsm: SoftHSM,
        key: KeyHandle,
        chain: CertificateChain,
        serials: SerialCounter | None = None,
    ) -> None:
        if chain.issuing.public_key != key.public_key or chain.issuing.subject != name:
            raise PkiError("CA key does not match the issuing certificate")
        self.name = name
        self.key = key
        self.chain = chain
        self._hsm = hsm
        self._serials = serials or SerialCounter()

    @property
    def certificate(self) -> Certificate:
        return self.chain.issuing

    @classmethod
    def create_root(
        cls,
        name: str,
        hsm: SoftHSM,
        not_before: datetime,
        not_after: datetime,
        alg: str = DEFAULT_ALGORITHM,
        serials: SerialCounter | None = None,
    ) -> "CertificateAuthority":
        serials = serials or SerialCounter()
        key = hsm.generate_keypair(alg)
        cert = _sign(
            hsm, key, serials.next(), name, name, key, not_before, not_after, is_ca=True, constraints=None
        )
        return cls(name, hsm, key, CertificateChain(cert), serials)

    def create_subordinate(
        self,
        name: str,
        hsm: SoftHSM,
        not_before: datetime,
        not_after: datetime,
        alg: str = DEFAULT_ALGORITHM,
        serials: SerialCounter | None = None,
    ) -> "CertificateAuthority":
        key = hsm.generate_keypair(alg)
        cert = _sign(
            self._hsm, self.key, self._serials.next(), name, self.name, key,
            not_before, not_after, is_ca=True, constraints=None,
        )
        chain = CertificateChain(self.chain.root, (*self.chain.intermediates, cert))
        return CertificateAuthority(name, hsm, key, chain, serials)

    def issue_certificate(
        self, csr: CertificateSigningRequest, granted: AuthorizationDetails
    ) -> Certificate:
        """Sign a contract certificate whose validity window is the granted period."""
        if not verify_csr(csr):
            raise PopFailure("CSR self-signature does not verify")
        problems = invariant_violations(granted)
        if problems:
            raise DetailsMismatch("granted details invalid: " + ", ".join(problems))
        if csr.requested_details.canonical() != granted.canonical():
            raise DetailsMismatch("details mismatch")
        return _sign(
            self._hsm,
            self.key,
            self._serials.next(),
            csr.subject_ev_id,
            self.name,
            KeyHandle("", csr.key_alg, csr.public_key),
            granted.period_start,
            granted.period_end,
            is_ca=False,
            constraints=granted,
        )


def issue_certificate(
    ca: CertificateAuthority, csr: CertificateSigningRequest, granted: AuthorizationDetails
) -> Certificate:
    return ca.issue_certificate(csr, granted)


def _sign(
    hsm: SoftHSM,
    signer: KeyHandle,
    serial: int,
    subject: str,
    issuer: str,
    subject_key: KeyHandle,
    not_before: datetime,
    not_after: datetime,
    *,
    is_ca: bool,
    constraints: AuthorizationDetails | None,
) -> Certificate:
    unsigned = Certificate(
        serial, subject, issuer, subject_key.public_key, subject_key.algorithm_id,
        to_utc(not_before), to_utc(not_after), is_ca, constraints,
        Signature(signer.algorithm_id, b""),
    )
    signature = hsm.sign(signer, unsigned.signed_bytes())
    return Certificate(
        serial, subject, issuer, subject_key.public_key, subject_key.algorithm_id,
        to_utc(not_before), to_utc(not_after), is_ca, constraints, signature,
    )


# -- persistence -----------------------------------------------------------


def save_certificate(path: str | Path, cert: Certificate) -> Path:
    path = Path(path)
    if path.suffix != CERTIFICATE_SUFFIX:
        path = path.with_suffix(CERTIFICATE_SUFFIX)
    path.write_text(json.dumps(cert.to_envelope(), indent=2, sort_keys=True) + "\n")
    return path


def load_certificate(path: str | Path) -> Certificate:
    text = Path(path).read_text().strip()
    if text.startswith("{"):
        return Certificate.from_envelope(json.loads(text))
    return Certificate.from_wire(text)
