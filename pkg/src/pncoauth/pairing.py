"""Out-of-band authenticated pairing between user agent and vehicle.

The vehicle shows a QR code carrying a short numeric code. Both sides run an
X25519 exchange over the (untrusted) short-range link and prove knowledge of
the code with key-confirmation MACs; a man in the middle who never saw the
QR code cannot produce a valid confirmation. The resulting keys protect all
later traffic in a :class:`SecureSession`.

Known limit: a 6-digit code is open to offline guessing by an attacker who
records a confirmation value, as with Bluetooth passkey entry. Lengthen the
code via ``digits`` where that matters.
"""

from __future__ import annotations

import hmac
import hashlib
import struct
from dataclasses import dataclass
from typing import Any
from urllib.parse import parse_qs, quote, urlsplit

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .core.canonical import b64url_decode, b64url_encode
from .core.runtime import RandomSource

OOB_DIGITS = 6
DEFAULT_UA_HOST = "ua.example.com"


class PairingError(Exception):
    pass


@dataclass(frozen=True)
class PairingOffer:
    device_name: str
    oob_code: str
    address: str = ""

    def __post_init__(self) -> None:
        if not self.oob_code.isdigit():
            raise ValueError("oob_code must be decimal digits")

    @classmethod
    def generate(cls, device_name: str, rng: RandomSource, digits: int = OOB_DIGITS, address: str = "") -> "PairingOffer":
        return cls(device_name, f"{rng.randbelow(10**digits):0{digits}d}", address)

    def to_qr(self, ua_host: str = DEFAULT_UA_HOST) -> str:
        return f"https://{ua_host}/connect?device_name={quote(self.device_name)}#oob_code={self.oob_code}"

    @classmethod
    def from_qr(cls, url: str, address: str = "") -> "PairingOffer":
        parts = urlsplit(url.strip())
        if parts.scheme != "https" or parts.path != "/connect":
            raise ValueError("not a user-agent connect URL")
        names = parse_qs(parts.query).get("device_name")
        codes = parse_qs(parts.fragment).get("oob_code")
        if not names or not codes:
            raise ValueError("connect URL lacks device_name or oob_code")
        return cls(names[0], codes[0], address)


def _public(key: x25519.X25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _derive(shared: bytes, oob_code: str, pk_ua: bytes, pk_ev: bytes) -> tuple[bytes, bytes, bytes]:
    okm = HKDF(
        algorithm=hashes.SHA256(),
        length=96,
        salt=oob_code.encode("ascii"),
        info=b"pnc-ble-pairing" + pk_ua + pk_ev,
    ).derive(shared)
    return okm[:32], okm[32:64], okm[64:]


def _mac(key: bytes, label: bytes, pk_ua: bytes, pk_ev: bytes) -> bytes:
    return hmac.new(key, label + pk_ua + pk_ev, hashlib.sha256).digest()


def _exchange(key: x25519.X25519PrivateKey, peer: bytes) -> bytes:
    try:
        return key.exchange(x25519.X25519PublicKey.from_public_bytes(peer))
    except ValueError:
        raise PairingError("degenerate public key") from None


def _peer_key(msg: Any) -> bytes:
    try:
        raw = b64url_decode(msg["pk"])
    except (KeyError, TypeError, ValueError):
        raise PairingError("malformed pairing message") from None
    if len(raw) != 32:
        raise PairingError("malformed public key")
    return raw


class SecureSession:
    """AES-GCM record protection with strictly increasing sequence numbers."""

    def __init__(self, send_key: bytes, recv_key: bytes, send_seq: int = 0, recv_seq: int = 0) -> None:
        self._send = AESGCM(send_key)
        self._recv = AESGCM(recv_key)
        self._keys = (send_key, recv_key)
        self.send_seq = send_seq
        self.recv_seq = recv_seq

    def seal(self, plaintext: bytes) -> bytes:
        self.send_seq += 1
        header = struct.pack(">Q", self.send_seq)
        return header + self._send.encrypt(b"\0\0\0\0" + header, plaintext, header)

    def open(self, frame: bytes) -> bytes:
        if len(frame) < 8 + 16:
            raise PairingError("short frame")
        header = frame[:8]
        (seq,) = struct.unpack(">Q", header)
        if seq <= self.recv_seq:
            raise PairingError("replayed or reordered frame")
        try:
            plaintext = self._recv.decrypt(b"\0\0\0\0" + header, frame[8:], header)
        except InvalidTag:
            raise PairingError("frame authentication failed") from None
        self.recv_seq = seq
        return plaintext

    def key_material(self) -> tuple[bytes, bytes]:
        """Raw keys, for the harness's key-reveal events and CLI state files."""
        return self._keys

    def to_dict(self) -> dict[str, Any]:
        return {
            "send_key": b64url_encode(self._keys[0]),
            "recv_key": b64url_encode(self._keys[1]),
            "send_seq": self.send_seq,
            "recv_seq": self.recv_seq,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "SecureSession":
        return cls(b64url_decode(obj["send_key"]), b64url_decode(obj["recv_key"]), obj["send_seq"], obj["recv_seq"])


class PairingInitiator:
    """User-agent side. Sends its key first and checks the vehicle's confirmation."""

    def __init__(self, offer: PairingOffer, rng: RandomSource) -> None:
        self.offer = offer
        self._key = x25519.X25519PrivateKey.from_private_bytes(rng.token_bytes(32))
        self._pk = _public(self._key)

    def hello(self) -> dict[str, str]:
        return {"pk": b64url_encode(self._pk)}

    def confirm(self, reply: Any) -> tuple[dict[str, str], SecureSession]:
        pk_ev = _peer_key(reply)
        k_conf, k_ua_ev, k_ev_ua = _derive(_exchange(self._key, pk_ev), self.offer.oob_code, self._pk, pk_ev)
        try:
            theirs = b64url_decode(reply["confirm"])
        except (KeyError, TypeError, ValueError):
            raise PairingError("malformed pairing reply") from None
        if not hmac.compare_digest(theirs, _mac(k_conf, b"ev", self._pk, pk_ev)):
            raise PairingError("key confirmation failed")
        finish = {"confirm": b64url_encode(_mac(k_conf, b"ua", self._pk, pk_ev))}
        return finish, SecureSession(k_ua_ev, k_ev_ua)


class PairingResponder:
    """Vehicle side. Knows the code it displayed in the QR."""

    def __init__(self, oob_code: str, rng: RandomSource) -> None:
        self._oob = oob_code
        self._key = x25519.X25519PrivateKey.from_private_bytes(rng.token_bytes(32))
        self._pk = _public(self._key)
        self._pending: tuple[bytes, bytes, bytes, bytes] | None = None

    def respond(self, hello: Any) -> dict[str, str]:
        pk_ua = _peer_key(hello)
        k_conf, k_ua_ev, k_ev_ua = _derive(_exchange(self._key, pk_ua), self._oob, pk_ua, self._pk)
        self._pending = (pk_ua, k_conf, k_ua_ev, k_ev_ua)
        return {"pk": b64url_encode(self._pk), "confirm": b64url_encode(_mac(k_conf, b"ev", pk_ua, self._pk))}

    def finish(self, msg: Any) -> SecureSession:
        if self._pending is None:
            raise PairingError("no pairing in progress")
        pk_ua, k_conf, k_ua_ev, k_ev_ua = self._pending
        self._pending = None
        try:
            theirs = b64url_decode(msg["confirm"])
        except (KeyError, TypeError, ValueError):
            raise PairingError("malformed pairing confirmation") from None
        if not hmac.compare_digest(theirs, _mac(k_conf, b"ua", pk_ua, self._pk)):
            raise PairingError("key confirmation failed")
        return SecureSession(k_ev_ua, k_ua_ev)
