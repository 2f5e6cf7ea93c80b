"""Simulated network: out-of-band, paired short-range and server-authenticated channels.

Actors hand real HTTP bytes to these channels. The server-authenticated
channel stands in for TLS with a one-shot key encapsulation to the server's
static X25519 key plus AES-GCM; it is a model of TLS, not an implementation
of it. Every message passes the adversary, which may drop, modify, replay
or inject, but learns plaintext only with a revealed key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ..core.httpwire import HttpParseError, HttpRequest, HttpResponse, TransportError
from ..core.runtime import RandomSource
from .trace import Trace

if TYPE_CHECKING:
    from ..vehicle import ElectricVehicle

OOB_SECURE = "oob_secure"
PAIRED_SYMMETRIC = "paired_symmetric"
SERVER_AUTH = "server_auth"

_ZERO_NONCE = b"\0" * 12


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _raw(key: x25519.X25519PublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _kem_keys(shared: bytes, eph_pub: bytes, server_pub: bytes) -> tuple[bytes, bytes]:
    okm = HKDF(hashes.SHA256(), 64, salt=None, info=b"pnc-sim-kem" + eph_pub + server_pub).derive(shared)
    return okm[:32], okm[32:]


def kem_seal_request(server_pub: bytes, plaintext: bytes, rng: RandomSource) -> tuple[bytes, bytes]:
    """Client side: returns (wire, response key)."""
    eph = x25519.X25519PrivateKey.from_private_bytes(rng.token_bytes(32))
    eph_pub = _raw(eph.public_key())
    k_req, k_resp = _kem_keys(eph.exchange(x25519.X25519PublicKey.from_public_bytes(server_pub)), eph_pub, server_pub)
    return eph_pub + AESGCM(k_req).encrypt(_ZERO_NONCE, plaintext, eph_pub), k_resp


def kem_open_request(server_key: bytes, wire: bytes) -> tuple[bytes, bytes]:
    """Server side (or an adversary holding the server key): returns (plaintext, response key)."""
    if len(wire) < 32 + 16:
        raise ValueError("short request")
    priv = x25519.X25519PrivateKey.from_private_bytes(server_key)
    server_pub = _raw(priv.public_key())
    eph_pub = wire[:32]
    try:
        shared = priv.exchange(x25519.X25519PublicKey.from_public_bytes(eph_pub))
        k_req, k_resp = _kem_keys(shared, eph_pub, server_pub)
        return AESGCM(k_req).decrypt(_ZERO_NONCE, wire[32:], eph_pub), k_resp
    except (InvalidTag, ValueError):
        raise ValueError("request does not decrypt") from None


def kem_seal_response(k_resp: bytes, plaintext: bytes) -> bytes:
    return AESGCM(k_resp).encrypt(_ZERO_NONCE, plaintext, b"response")


def kem_open_response(k_resp: bytes, wire: bytes) -> bytes:
    try:
        return AESGCM(k_resp).decrypt(_ZERO_NONCE, wire, b"response")
    except (InvalidTag, ValueError):
        raise ValueError("response does not decrypt") from None


@dataclass
class Message:
    """One message as the adversary sees it."""

    channel: str
    kind: str
    src: str
    dst: str
    direction: str
    data: bytes
    protected: bool
    base: str = ""
    # request this response belongs to (server_auth only)
    request: "Message | None" = None


@dataclass
class Knowledge:
    """What the adversary has learned: plaintexts it read and keys it was given."""

    plaintexts: dict[str, str] = field(default_factory=dict)  # digest -> how it was obtained
    keys: dict[tuple[str, str], Any] = field(default_factory=dict)

    def learn(self, plaintext: bytes, how: str) -> None:
        self.plaintexts.setdefault(_digest(plaintext), how)

    def knows(self, plaintext: bytes) -> bool:
        return _digest(plaintext) in self.plaintexts


class Adversary:
    """Passive network adversary. Presets override :meth:`intercept`.

    ``intercept`` returns a list: element 0 replaces the message (``None``
    drops it), further elements are injected after it on the same path.
    """

    name = "passive"

    def __init__(self) -> None:
        self.knowledge = Knowledge()
        self.network: "Network | None" = None
        self.log: list[str] = []

    def attach(self, network: "Network") -> None:
        self.network = network

    def receive_key(self, entity: str, key_kind: str, material: Any) -> None:
        self.knowledge.keys[(entity, key_kind)] = material

    def observe(self, msg: Message) -> None:
        if not msg.protected:
            self.knowledge.learn(msg.data, f"cleartext on {msg.channel}")

    def intercept(self, msg: Message) -> list[bytes | None]:
        return [msg.data]

    def on_injected_response(self, msg: Message, response: bytes | None) -> None:
        pass


@dataclass
class ServerEndpoint:
    base: str
    owner: str
    handler: Callable[[HttpRequest], HttpResponse]
    private_key: bytes
    public_key: bytes
    replay_cache: set[bytes] = field(default_factory=set)

    def serve(self, wire: bytes) -> tuple[bytes | None, str]:
        eph = wire[:32]
        if eph in self.replay_cache:
            return None, "replay"
        try:
            plaintext, k_resp = kem_open_request(self.private_key, wire)
        except ValueError:
            return None, "undecryptable"
        self.replay_cache.add(eph)
        try:
            request = HttpRequest.parse(plaintext)
        except HttpParseError:
            return None, "malformed"
        response = self.handler(request)
        return kem_seal_response(k_resp, response.to_bytes()), "ok"


@dataclass
class ByteCounter:
    messages: int = 0
    plaintext: int = 0
    wire: int = 0


class Network:
    def __init__(self, trace: Trace, rng: RandomSource, adversary: Adversary | None = None) -> None:
        self.trace = trace
        self.rng = rng
        self.adversary = adversary or Adversary()
        self.adversary.attach(self)
        self.servers: dict[str, ServerEndpoint] = {}
        self.counters: dict[tuple[str, str, str], ByteCounter] = {}
        self.oob_log: list[tuple[str, str, bytes]] = []
        self._pairing_keys: dict[str, Callable[[], Any]] = {}

    # -- bookkeeping ---------------------------------------------------------

    def _count(self, kind: str, src: str, dst: str, plaintext: int, wire: int) -> None:
        counter = self.counters.setdefault((kind, src, dst), ByteCounter())
        counter.messages += 1
        counter.plaintext += plaintext
        counter.wire += wire

    def plaintext_bytes(self, party: str | None = None, kinds: tuple[str, ...] = (SERVER_AUTH,)) -> int:
        """Application-layer bytes (HTTP head and body) sent or received by ``party``."""
        return sum(
            c.plaintext
            for (kind, src, dst), c in self.counters.items()
            if kind in kinds and (party is None or party in (src, dst))
        )

    def _record(self, msg: Message, fate: str, plaintext: bytes | None = None) -> None:
        record: dict[str, Any] = {
            "channel": msg.channel,
            "ch_kind": msg.kind,
            "src": msg.src,
            "dst": msg.dst,
            "dir": msg.direction,
            "len": len(msg.data),
            "digest": _digest(msg.data),
            "fate": fate,
        }
        if plaintext is not None:
            record["pt_len"] = len(plaintext)
            record["pt_digest"] = _digest(plaintext)
        self.trace.message(**record)

    # -- key reveal ------------------------------------------------------------

    def register_pairing_keys(self, entity: str, getter: Callable[[], Any]) -> None:
        self._pairing_keys[entity] = getter

    def reveal(self, entity: str, key_kind: str) -> Any:
        """Hand a key to the adversary and log it; the trace oracle sees the reveal."""
        if key_kind == "transport":
            material = {s.base: s.private_key for s in self.servers.values() if s.owner == entity}
            if not material:
                raise ValueError(f"{entity} runs no server")
        elif key_kind == "pairing":
            material = self._pairing_keys[entity]()
        else:
            raise ValueError(f"harness cannot reveal {key_kind} keys of {entity}")
        self.trace.key_reveal(entity, key_kind)
        self.adversary.receive_key(entity, key_kind, material)
        return material

    # -- out of band -------------------------------------------------------------

    def oob(self, src: str, dst: str, payload: bytes) -> bytes:
        """QR-code handoff: recorded but never shown to the adversary."""
        msg = Message(f"{src}->{dst}", OOB_SECURE, src, dst, "oob", payload, True)
        self.oob_log.append((src, dst, payload))
        self._record(msg, "delivered")
        self._count(OOB_SECURE, src, dst, len(payload), len(payload))
        return payload

    # -- server authenticated -----------------------------------------------------

    def add_server(self, base: str, owner: str, handler: Callable[[HttpRequest], HttpResponse]) -> ServerEndpoint:
        priv = x25519.X25519PrivateKey.from_private_bytes(self.rng.token_bytes(32))
        endpoint = ServerEndpoint(
            base, owner, handler,
            priv.private_bytes(serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()),
            _raw(priv.public_key()),
        )
        self.servers[base] = endpoint
        return endpoint

    def transport_for(self, client: str) -> Callable[[str, HttpRequest], HttpResponse]:
        def transport(base: str, request: HttpRequest) -> HttpResponse:
            return self.call(client, base, request)

        return transport

    def call(self, client: str, base: str, request: HttpRequest) -> HttpResponse:
        server = self.servers.get(base)
        if server is None:
            raise TransportError(f"no route to {base}")
        plaintext = request.to_bytes()
        wire, k_resp = kem_seal_request(server.public_key, plaintext, self.rng)
        channel = f"{client}->{base}"
        msg = Message(channel, SERVER_AUTH, client, server.owner, "request", wire, True, base)
        self._count(SERVER_AUTH, client, server.owner, len(plaintext), len(wire))
        self.adversary.observe(msg)
        actions = self.adversary.intercept(msg)
        delivered = actions[0] if actions else None
        response_wire: bytes | None = None
        if delivered is None:
            self._record(msg, "dropped", plaintext)
        else:
            fate = "delivered" if delivered == wire else "modified"
            response_wire, status = server.serve(delivered)
            self._record(msg, fate if status == "ok" else f"{fate}-rejected-{status}", plaintext)
        for extra in actions[1:]:
            self._inject(msg, server, extra)
        if response_wire is None:
            raise TransportError(f"{base}: no response")

        response_plain = kem_open_response(k_resp, response_wire)
        reply = Message(
            f"{base}->{client}", SERVER_AUTH, server.owner, client, "response", response_wire, True, base, request=msg
        )
        self._count(SERVER_AUTH, server.owner, client, len(response_plain), len(response_wire))
        self.adversary.observe(reply)
        actions = self.adversary.intercept(reply)
        delivered = actions[0] if actions else None
        if delivered is None:
            self._record(reply, "dropped", response_plain)
            raise TransportError(f"{base}: response lost")
        try:
            final_plain = response_plain if delivered == response_wire else kem_open_response(k_resp, delivered)
        except ValueError:
            self._record(reply, "modified-undecryptable", response_plain)
            raise TransportError(f"{base}: response failed authentication") from None
        self._record(reply, "delivered" if delivered == response_wire else "modified", final_plain)
        try:
            return HttpResponse.parse(final_plain)
        except HttpParseError as exc:
            raise TransportError(str(exc)) from None

    def _inject(self, cause: Message, server: ServerEndpoint, data: bytes) -> None:
        msg = Message(cause.channel, SERVER_AUTH, "adversary", server.owner, "request", data, True, server.base)
        response, status = server.serve(data)
        self._record(msg, "injected" if status == "ok" else f"injected-rejected-{status}")
        self.adversary.on_injected_response(msg, response)

    # -- paired short-range link -----------------------------------------------

    def ble_link(self, ua: str, ev: "ElectricVehicle") -> Callable[[bytes], bytes]:
        channel = f"{ua}<->{ev.ev_id}"

        def link(frame: bytes) -> bytes:
            msg = Message(channel, PAIRED_SYMMETRIC, ua, ev.ev_id, "request", frame, frame[:1] == b"S")
            self._count(PAIRED_SYMMETRIC, ua, ev.ev_id, len(frame), len(frame))
            self.adversary.observe(msg)
            actions = self.adversary.intercept(msg)
            delivered = actions[0] if actions else None
            for extra in actions[1:]:
                if extra is not None:
                    self._record(Message(channel, PAIRED_SYMMETRIC, "adversary", ev.ev_id, "request", extra, True), "injected")
                    ev.handle_ble(extra)
            if delivered is None:
                self._record(msg, "dropped")
                raise TransportError("short-range link: frame lost")
            self._record(msg, "delivered" if delivered == frame else "modified")
            answer = ev.handle_ble(delivered)
            reply = Message(channel, PAIRED_SYMMETRIC, ev.ev_id, ua, "response", answer, answer[:1] == b"S", request=msg)
            self._count(PAIRED_SYMMETRIC, ev.ev_id, ua, len(answer), len(answer))
            self.adversary.observe(reply)
            actions = self.adversary.intercept(reply)
            delivered = actions[0] if actions else None
            if delivered is None:
                self._record(reply, "dropped")
                raise TransportError("short-range link: frame lost")
            self._record(reply, "delivered" if delivered == answer else "modified")
            return delivered

        return link
