"""EMSP authorization server: device authorization grant with rich authorization requests.

Implements the device authorization endpoint, user login, the verification
page (lookup by user code and grant/deny), and the token endpoint with
RFC 8628 polling semantics. Every device code yields at most one token.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from enum import Enum
from typing import Any, Callable, Iterable

from .core.canonical import b64url_decode, b64url_encode
from .core.events import EventSink, NullSink
from .core.httpwire import HttpRequest, HttpResponse, HttpParseError, json_response
from .core.model import (
    DEVICE_CODE_GRANT_TYPE,
    PNC_DETAIL_TYPE,
    PROVISIONING_SCOPE,
    AuthorizationDetails,
    Scope,
    UserCode,
    check_identifier,
    details_from_list,
    new_device_code,
    normalize_user_code,
    to_utc,
    validate_authorization_details,
)
from .core.runtime import Clock, RandomSource, SystemClock, SystemRandomSource
from .pki import KeyHandle, SoftHSM
from .tokens import AccessToken

log = logging.getLogger(__name__)

# RFC 8628 section 3.5 error codes
AUTHORIZATION_PENDING = "authorization_pending"
SLOW_DOWN = "slow_down"
ACCESS_DENIED = "access_denied"
EXPIRED_TOKEN = "expired_token"
# RFC 6749 / RFC 9396
INVALID_GRANT = "invalid_grant"
INVALID_CLIENT = "invalid_client"
INVALID_REQUEST = "invalid_request"
INVALID_SCOPE = "invalid_scope"
UNAUTHORIZED_CLIENT = "unauthorized_client"
UNSUPPORTED_GRANT_TYPE = "unsupported_grant_type"
INVALID_AUTHORIZATION_DETAILS = "invalid_authorization_details"
# verification page
NOT_FOUND = "not_found"
ALREADY_DECIDED = "already_decided"
LOGIN_REQUIRED = "login_required"
INVALID_CREDENTIALS = "invalid_credentials"

DEFAULT_PATHS = {
    "device_authorization": "/device_authorization",
    "token": "/token",
    "verify": "/verify",
    "login": "/login",
    "decision": "/decision",
    "public_key": "/public_key",
}

PASSWORD_HASH_ITERATIONS = 200_000
SESSION_COOKIE = "session"


class OAuthError(Exception):
    def __init__(self, error: str, description: str = "", status: int = 400, **extra: Any) -> None:
        super().__init__(f"{error}: {description}" if description else error)
        self.error = error
        self.description = description
        self.status = status
        self.extra = extra

    def to_body(self) -> dict[str, Any]:
        body: dict[str, Any] = {"error": self.error}
        if self.description:
            body["error_description"] = self.description
        body.update(self.extra)
        return body

    def to_response(self) -> HttpResponse:
        return json_response(self.status, self.to_body())


class SessionState(str, Enum):
    PENDING = "pending"
    GRANTED = "granted"
    DENIED = "denied"
    EXPIRED = "expired"


class Decision(str, Enum):
    GRANT = "grant"
    DENY = "deny"


@dataclass
class DeviceAuthorizationSession:
    device_code: str
    user_code: UserCode
    client_id: str
    scope: Scope
    details: AuthorizationDetails
    created_at: datetime
    expires_in: int = 600
    interval: int = 5
    state: SessionState = SessionState.PENDING
    last_poll_at: datetime | None = None
    granted_by: str | None = None
    consumed: bool = False
    tokens_issued: int = 0

    @property
    def expires_at(self) -> datetime:
        return self.created_at + timedelta(seconds=self.expires_in)

    def is_expired(self, now: datetime) -> bool:
        return now > self.expires_at


@dataclass(frozen=True)
class SessionView:
    """What the verification page shows the resource owner."""

    user_code: UserCode
    client_id: str
    scope: Scope
    details: AuthorizationDetails

    def to_wire(self) -> dict[str, Any]:
        return {
            "user_code": self.user_code.display,
            "client_id": self.client_id,
            "scope": str(self.scope),
            "authorization_details": [self.details.to_wire()],
        }


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    salt: bytes
    verifier: bytes
    iterations: int = PASSWORD_HASH_ITERATIONS
    display_name: str = ""

    @classmethod
    def create(
        cls,
        user_id: str,
        password: str,
        display_name: str = "",
        rng: RandomSource | None = None,
        iterations: int = PASSWORD_HASH_ITERATIONS,
    ) -> "UserRecord":
        salt = (rng or SystemRandomSource()).token_bytes(16)
        return cls(check_identifier(user_id, "user id"), salt, _hash_password(password, salt, iterations), iterations, display_name)

    def check(self, password: str) -> bool:
        return hmac.compare_digest(_hash_password(password, self.salt, self.iterations), self.verifier)

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_id": self.user_id,
            "salt": b64url_encode(self.salt),
            "verifier": b64url_encode(self.verifier),
            "iterations": self.iterations,
            "display_name": self.display_name,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "UserRecord":
        return cls(
            obj["user_id"],
            b64url_decode(obj["salt"]),
            b64url_decode(obj["verifier"]),
            int(obj.get("iterations", PASSWORD_HASH_ITERATIONS)),
            obj.get("display_name", ""),
        )


def _hash_password(password: str, salt: bytes, iterations: int) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)


class AuthorizationServer:
    """In-memory authorization server; all session transitions happen under one lock."""

    def __init__(
        self,
        issuer: str,
        hsm: SoftHSM,
        signing_key: KeyHandle,
        *,
        clients: Iterable[str],
        verification_uri: str,
        users: Iterable[UserRecord] = (),
        clock: Clock | None = None,
        rng: RandomSource | None = None,
        events: EventSink | None = None,
        expires_in: int = 600,
        interval: int = 5,
        token_lifetime: int = 300,
        slow_down_step: int = 5,
        login_lifetime: int = 900,
        required_scope: Scope = Scope.of(PROVISIONING_SCOPE),
        detail_type: str = PNC_DETAIL_TYPE,
        paths: dict[str, str] | None = None,
        enforce_single_use: bool = True,
        journal: Callable[[dict[str, Any]], None] | None = None,
    ) -> None:
        self.issuer = check_identifier(issuer, "issuer")
        self.signing_key = signing_key
        self.verification_uri = verification_uri
        self.clients = set(clients)
        self.users = {u.user_id: u for u in users}
        self.clock = clock or SystemClock()
        self.rng = rng or SystemRandomSource()
        self.events = events if events is not None else NullSink()
        self.expires_in = expires_in
        self.interval = interval
        self.token_lifetime = token_lifetime
        self.slow_down_step = slow_down_step
        self.login_lifetime = login_lifetime
        self.required_scope = required_scope
        self.detail_type = detail_type
        self.paths = {**DEFAULT_PATHS, **(paths or {})}
        # Mutation switch for oracle-sensitivity tests; never disable in deployments.
        self.enforce_single_use = enforce_single_use
        self._journal = journal
        self._hsm = hsm
        self._lock = threading.RLock()
        self._sessions: dict[str, DeviceAuthorizationSession] = {}
        # creation order; with one expires_in per server this is also expiry order
        self._created: deque[str] = deque()
        self._by_user_code: dict[str, str] = {}
        self._logins: dict[str, tuple[str, datetime]] = {}
        self._dummy_user = UserRecord(
            "-", b"\0" * 16, b"\0" * 32, PASSWORD_HASH_ITERATIONS if not self.users else next(iter(self.users.values())).iterations
        )

    @property
    def public_key(self) -> bytes:
        return self.signing_key.public_key

    def _now(self, now: datetime | None) -> datetime:
        return to_utc(now) if now is not None else self.clock.now()

    def _record(self, event: str, **fields: Any) -> None:
        if self._journal is not None:
            self._journal({"event": event, **fields})

    # -- device authorization endpoint ------------------------------------

    def handle_device_authorization(
        self,
        client_id: str,
        scope: Scope,
        details: AuthorizationDetails,
        now: datetime | None = None,
    ) -> dict[str, Any]:
        now = self._now(now)
        if client_id not in self.clients:
            raise OAuthError(INVALID_CLIENT, "unknown client", status=401)
        if not scope.covers(self.required_scope):
            raise OAuthError(INVALID_SCOPE, f"scope must include {self.required_scope}")
        result = validate_authorization_details(details, now, self.detail_type)
        if not result.ok:
            raise OAuthError(INVALID_AUTHORIZATION_DETAILS, "; ".join(result.violations), violations=list(result.violations))
        with self._lock:
            self._purge(now)
            device_code = new_device_code(self.rng)
            while device_code in self._sessions:
                device_code = new_device_code(self.rng)
            user_code = UserCode.generate(self.rng)
            while user_code.code in self._by_user_code:
                user_code = UserCode.generate(self.rng)
            session = DeviceAuthorizationSession(
                device_code, user_code, client_id, scope, details, now, self.expires_in, self.interval
            )
            self._sessions[device_code] = session
            self._created.append(device_code)
            self._by_user_code[user_code.code] = device_code
        self.events.note(self.issuer, "device_authorization", client_id=client_id, user_code=user_code.display)
        self._record("device_authorization", client_id=client_id, user_code=user_code.code)
        return {
            "device_code": device_code,
            "user_code": user_code.display,
            "verification_uri": self.verification_uri,
            "verification_uri_complete": f"{self.verification_uri}?user_code={user_code.display}",
            "expires_in": self.expires_in,
            "interval": self.interval,
        }

    # -- token endpoint ----------------------------------------------------

    def handle_token_poll(
        self,
        client_id: str,
        device_code: str,
        grant_type: str,
        now: datetime | None = None,
    ) -> AccessToken:
        now = self._now(now)
        if grant_type != DEVICE_CODE_GRANT_TYPE:
            raise OAuthError(UNSUPPORTED_GRANT_TYPE)
        with self._lock:
            session = self._sessions.get(device_code)
            if session is None:
                raise OAuthError(INVALID_GRANT, "unknown device code")
            if session.client_id != client_id:
                raise OAuthError(UNAUTHORIZED_CLIENT, "device code was issued to another client")
            if session.consumed:
                raise OAuthError(EXPIRED_TOKEN, "device code already used")
            if session.is_expired(now):
                if session.state is SessionState.PENDING:
                    session.state = SessionState.EXPIRED
                self._by_user_code.pop(session.user_code.code, None)
                raise OAuthError(EXPIRED_TOKEN)
            if session.last_poll_at is not None and (now - session.last_poll_at).total_seconds() < session.interval:
                session.interval += self.slow_down_step
                session.last_poll_at = now
                raise OAuthError(SLOW_DOWN, interval=session.interval)
            session.last_poll_at = now
            if session.state is SessionState.PENDING:
                raise OAuthError(AUTHORIZATION_PENDING)
            if session.state is SessionState.DENIED:
                raise OAuthError(ACCESS_DENIED)
            token = self.issue_access_token(session, now)
            if self.enforce_single_use:
                session.consumed = True
                self._by_user_code.pop(session.user_code.code, None)
            return token

    def issue_access_token(self, session: DeviceAuthorizationSession, now: datetime) -> AccessToken:
        if session.state is not SessionState.GRANTED or session.granted_by is None:
            raise OAuthError(INVALID_GRANT, "session has not been granted")
        unsigned = AccessToken(
            alg=self.signing_key.algorithm_id,
            issuer=self.issuer,
            subject=session.granted_by,
            client_id=session.client_id,
            scope=session.scope,
            authorization_details=session.details,
            issued_at=now,
            expires_at=now + timedelta(seconds=self.token_lifetime),
            token_id=b64url_encode(self.rng.token_bytes(16)),
        )
        sig = self._hsm.sign(self.signing_key, unsigned.signing_input())
        token = replace(unsigned, signature=sig.value)
        session.tokens_issued += 1
        self.events.note(self.issuer, "token_issued", client_id=session.client_id, jti=token.token_id)
        self.events.commit("token", self.issuer, session.client_id, session.device_code.encode("ascii"))
        self._record("token_issued", user_code=session.user_code.code, jti=token.token_id)
        return token

    # -- resource owner side ----------------------------------------------

    def authenticate_user(self, user_id: str, password: str, now: datetime | None = None) -> str:
        """Check credentials and return a fresh session cookie value.

        Unknown users and wrong passwords fail identically, after the same
        amount of hashing work.
        """
        now = self._now(now)
        record = self.users.get(user_id)
        ok = (record or self._dummy_user).check(password) and record is not None
        if not ok:
            raise OAuthError(INVALID_CREDENTIALS, "invalid user id or password", status=401)
        cookie = b64url_encode(self.rng.token_bytes(32))
        with self._lock:
            self._logins[cookie] = (user_id, now + timedelta(seconds=self.login_lifetime))
        return cookie

    def user_for_cookie(self, cookie: str | None, now: datetime | None = None) -> str:
        now = self._now(now)
        with self._lock:
            entry = self._logins.get(cookie or "")
        if entry is None or now > entry[1]:
            raise OAuthError(LOGIN_REQUIRED, status=401)
        return entry[0]

    def _live_session(self, code: UserCode | str, now: datetime) -> DeviceAuthorizationSession:
        try:
            normalized = code.code if isinstance(code, UserCode) else normalize_user_code(code)
        except ValueError:
            raise OAuthError(NOT_FOUND, status=404) from None
        device_code = self._by_user_code.get(normalized)
        session = self._sessions.get(device_code) if device_code else None
        if session is None or session.consumed or session.is_expired(now):
            raise OAuthError(NOT_FOUND, status=404)
        return session

    def lookup_by_user_code(self, code: UserCode | str, now: datetime | None = None) -> SessionView:
        now = self._now(now)
        with self._lock:
            session = self._live_session(code, now)
            if session.state is not SessionState.PENDING:
                raise OAuthError(NOT_FOUND, status=404)
            return SessionView(session.user_code, session.client_id, session.scope, session.details)

    def record_decision(
        self, code: UserCode | str, user_id: str, decision: Decision | str, now: datetime | None = None
    ) -> SessionState:
        now = self._now(now)
        decision = Decision(decision)
        target = SessionState.GRANTED if decision is Decision.GRANT else SessionState.DENIED
        with self._lock:
            session = self._live_session(code, now)
            if session.state is SessionState.PENDING:
                session.state = target
                session.granted_by = user_id
            elif session.state is not target or session.granted_by != user_id:
                raise OAuthError(ALREADY_DECIDED, status=409)
        self.events.note(self.issuer, "decision", decision=decision.value, user_code=session.user_code.display, user=user_id)
        self._record("decision", user_code=session.user_code.code, decision=decision.value, user=user_id)
        return target

    def session_for_device_code(self, device_code: str) -> DeviceAuthorizationSession | None:
        return self._sessions.get(device_code)

    def _purge(self, now: datetime) -> None:
        horizon = timedelta(hours=1)
        while self._created:
            session = self._sessions.get(self._created[0])
            if session is not None and now <= session.expires_at + horizon:
                break
            dc = self._created.popleft()
            if session is not None:
                del self._sessions[dc]
                if self._by_user_code.get(session.user_code.code) == dc:
                    del self._by_user_code[session.user_code.code]

    # -- HTTP binding -------------------------------------------------------

    def handle(self, request: HttpRequest) -> HttpResponse:
        routes = {
            ("POST", self.paths["device_authorization"]): self._http_device_authorization,
            ("POST", self.paths["token"]): self._http_token,
            ("POST", self.paths["login"]): self._http_login,
            ("GET", self.paths["verify"]): self._http_verify,
            ("POST", self.paths["decision"]): self._http_decision,
            ("GET", self.paths["public_key"]): self._http_public_key,
        }
        route = routes.get((request.method, request.path))
        if route is None:
            return json_response(404, {"error": NOT_FOUND})
        try:
            return route(request)
        except OAuthError as exc:
            return exc.to_response()
        except HttpParseError as exc:
            return OAuthError(INVALID_REQUEST, str(exc)).to_response()

    def _http_device_authorization(self, request: HttpRequest) -> HttpResponse:
        form = request.form()
        try:
            scope = Scope.parse(form.get("scope", ""))
        except ValueError as exc:
            raise OAuthError(INVALID_SCOPE, str(exc)) from None
        try:
            details = details_from_list(json.loads(form["authorization_details"]), self.detail_type)
        except KeyError:
            raise OAuthError(INVALID_REQUEST, "authorization_details missing") from None
        except ValueError as exc:
            raise OAuthError(INVALID_AUTHORIZATION_DETAILS, str(exc)) from None
        return json_response(200, self.handle_device_authorization(form.get("client_id", ""), scope, details))

    def _http_token(self, request: HttpRequest) -> HttpResponse:
        form = request.form()
        token = self.handle_token_poll(
            form.get("client_id", ""), form.get("device_code", ""), form.get("grant_type", "")
        )
        return json_response(
            200,
            {
                "access_token": token.to_wire(),
                "token_type": "Bearer",
                "expires_in": self.token_lifetime,
                "scope": str(token.scope),
                "authorization_details": [token.authorization_details.to_wire()],
            },
        )

    def _http_login(self, request: HttpRequest) -> HttpResponse:
        form = request.form()
        cookie = self.authenticate_user(form.get("user_id", ""), form.get("password", ""))
        return json_response(
            200,
            {"status": "ok"},
            [("Set-Cookie", f"{SESSION_COOKIE}={cookie}; HttpOnly; Secure; SameSite=Strict")],
        )

    def _http_verify(self, request: HttpRequest) -> HttpResponse:
        self.user_for_cookie(request.cookie(SESSION_COOKIE))
        view = self.lookup_by_user_code(request.query.get("user_code", ""))
        return json_response(200, view.to_wire())

    def _http_decision(self, request: HttpRequest) -> HttpResponse:
        user_id = self.user_for_cookie(request.cookie(SESSION_COOKIE))
        form = request.form()
        try:
            decision = Decision(form.get("decision", ""))
        except ValueError:
            raise OAuthError(INVALID_REQUEST, "decision must be grant or deny") from None
        state = self.record_decision(form.get("user_code", ""), user_id, decision)
        return json_response(200, {"status": state.value})

    def _http_public_key(self, request: HttpRequest) -> HttpResponse:
        return json_response(
            200, {"issuer": self.issuer, "alg": self.signing_key.algorithm_id, "public_key": b64url_encode(self.public_key)}
        )
