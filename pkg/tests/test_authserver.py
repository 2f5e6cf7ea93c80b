from __future__ import annotations

import json
import threading
from datetime import timedelta

import pytest
from hypothesis import given, settings, strategies as st

from pncoauth.authserver import (
    ACCESS_DENIED,
    ALREADY_DECIDED,
    AUTHORIZATION_PENDING,
    EXPIRED_TOKEN,
    INVALID_AUTHORIZATION_DETAILS,
    INVALID_CLIENT,
    INVALID_CREDENTIALS,
    INVALID_GRANT,
    NOT_FOUND,
    SLOW_DOWN,
    UNAUTHORIZED_CLIENT,
    UNSUPPORTED_GRANT_TYPE,
    AuthorizationServer,
    OAuthError,
    SessionState,
    UserRecord,
)
from pncoauth.core.httpwire import form_request, json_request
from pncoauth.core.model import DEVICE_CODE_GRANT_TYPE, Scope, UserCode, details_list_to_wire, is_device_code
from pncoauth.core.runtime import SeededRandomSource, VirtualClock
from pncoauth.pki import SoftHSM
from pncoauth.tokens import AccessToken

from conftest import CLIENT, SCOPE, T0, make_details

GT = DEVICE_CODE_GRANT_TYPE


def error_of(fn, *args, **kwargs) -> str:
    with pytest.raises(OAuthError) as info:
        fn(*args, **kwargs)
    return info.value.error


def start(server, details=None):
    return server.handle_device_authorization(CLIENT, SCOPE, details or make_details())


def poll(server, resp, client=CLIENT):
    return server.handle_token_poll(client, resp["device_code"], GT)


# -- device authorization -------------------------------------------------------


def test_device_authorization_response(auth_server):
    resp = start(auth_server)
    assert resp["interval"] == 5 and resp["expires_in"] == 600
    assert is_device_code(resp["device_code"])
    assert UserCode(resp["user_code"]).display == resp["user_code"]
    assert resp["verification_uri_complete"] == resp["verification_uri"] + "?user_code=" + resp["user_code"]


def test_unknown_client(auth_server):
    assert error_of(auth_server.handle_device_authorization, "stranger", SCOPE, make_details()) == INVALID_CLIENT


def test_invalid_details_echo_violations(auth_server):
    with pytest.raises(OAuthError) as info:
        auth_server.handle_device_authorization(CLIENT, SCOPE, make_details(period="10.00", daily="20.00"))
    assert info.value.error == INVALID_AUTHORIZATION_DETAILS
    assert "daily exceeds period cap" in info.value.to_body()["violations"]


def test_scope_required(auth_server):
    assert error_of(auth_server.handle_device_authorization, CLIENT, Scope.of("openid"), make_details()) == "invalid_scope"


def test_user_codes_distinct_over_10000(auth_server):
    codes = {start(auth_server)["user_code"] for _ in range(10_000)}
    assert len(codes) == 10_000


# -- polling semantics ------------------------------------------------------------


def test_pending_then_token_then_single_use(auth_server, clock):
    resp = start(auth_server)
    assert error_of(poll, auth_server, resp) == AUTHORIZATION_PENDING
    auth_server.record_decision(resp["user_code"], "driver", "grant")
    clock.advance(5)
    token = poll(auth_server, resp)
    assert token.verify(auth_server.public_key)
    assert token.authorization_details == make_details()
    assert token.expires_at - token.issued_at == timedelta(seconds=300)
    clock.advance(5)
    assert error_of(poll, auth_server, resp) == EXPIRED_TOKEN


def test_slow_down_adds_five_seconds(auth_server, clock):
    resp = start(auth_server)
    assert error_of(poll, auth_server, resp) == AUTHORIZATION_PENDING
    clock.advance(1)
    with pytest.raises(OAuthError) as info:
        poll(auth_server, resp)
    assert info.value.error == SLOW_DOWN and info.value.to_body()["interval"] == 10
    clock.advance(9)
    assert error_of(poll, auth_server, resp) == SLOW_DOWN
    clock.advance(15)
    assert error_of(poll, auth_server, resp) == AUTHORIZATION_PENDING


def test_expired_after_600_seconds(auth_server, clock):
    resp = start(auth_server)
    clock.advance(600)
    assert error_of(poll, auth_server, resp) == AUTHORIZATION_PENDING
    clock.advance(1)
    assert error_of(poll, auth_server, resp) == EXPIRED_TOKEN
    assert auth_server.session_for_device_code(resp["device_code"]).state is SessionState.EXPIRED


def test_grant_too_late_is_expired(auth_server, clock):
    resp = start(auth_server)
    clock.advance(601)
    assert error_of(auth_server.record_decision, resp["user_code"], "driver", "grant") == NOT_FOUND
    assert error_of(poll, auth_server, resp) == EXPIRED_TOKEN


def test_access_denied(auth_server, clock):
    resp = start(auth_server)
    auth_server.record_decision(resp["user_code"], "driver", "deny")
    assert error_of(poll, auth_server, resp) == ACCESS_DENIED


def test_poll_errors(auth_server):
    resp = start(auth_server)
    assert error_of(auth_server.handle_token_poll, CLIENT, resp["device_code"], "password") == UNSUPPORTED_GRANT_TYPE
    assert error_of(auth_server.handle_token_poll, CLIENT, "nope", GT) == INVALID_GRANT
    assert error_of(auth_server.handle_token_poll, "other", resp["device_code"], GT) == UNAUTHORIZED_CLIENT


def reference_outcomes(gaps: list[int], grant_after: int | None, deny: bool) -> list[str]:
    """Independent model of the token endpoint for one session."""
    out, interval, t, last = [], 5, 0, None
    for gap in gaps:
        t += gap
        if "token" in out or t > 600:
            out.append("expired_token")
            continue
        if last is not None and t - last < interval:
            interval += 5
            last = t
            out.append("slow_down")
            continue
        last = t
        if grant_after is not None and t >= grant_after:
            out.append("access_denied" if deny else "token")
        else:
            out.append("authorization_pending")
    return out


@settings(max_examples=200, deadline=None)
@given(
    gaps=st.lists(st.integers(0, 40), min_size=1, max_size=25),
    grant_after=st.none() | st.integers(0, 700),
    deny=st.booleans(),
)
def test_polling_matches_reference_model(gaps, grant_after, deny):
    clock = VirtualClock(T0)
    hsm = SoftHSM(SeededRandomSource("p"), "as")
    server = AuthorizationServer(
        "emsp-a", hsm, hsm.generate_keypair(), clients=[CLIENT], verification_uri="https://as/verify",
        clock=clock, rng=SeededRandomSource("p2"),
    )
    resp = start(server)
    decided, got, t = False, [], 0
    for gap in gaps:
        t += gap
        if grant_after is not None and not decided and t >= grant_after and grant_after <= 600:
            clock.advance_to(grant_after)
            server.record_decision(resp["user_code"], "driver", "deny" if deny else "grant")
            decided = True
        clock.advance_to(t)
        try:
            poll(server, resp)
            got.append("token")
        except OAuthError as exc:
            got.append(exc.error)
    effective_grant = grant_after if grant_after is not None and grant_after <= 600 else None
    assert got == reference_outcomes(gaps, effective_grant, deny)
    assert got.count("token") <= 1


def test_concurrent_polls_issue_one_token(auth_server, clock):
    for _ in range(20):
        resp = start(auth_server)
        auth_server.record_decision(resp["user_code"], "driver", "grant")
        clock.advance(10)
        results, barrier = [], threading.Barrier(8)

        def worker():
            barrier.wait()
            try:
                results.append(poll(auth_server, resp))
            except OAuthError as exc:
                results.append(exc.error)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert sum(isinstance(r, AccessToken) for r in results) == 1
        assert auth_server.session_for_device_code(resp["device_code"]).tokens_issued == 1


def test_decision_races_resolve_to_one(auth_server):
    resp = start(auth_server)
    outcomes, barrier = [], threading.Barrier(2)

    def decide(value):
        barrier.wait()
        try:
            outcomes.append(auth_server.record_decision(resp["user_code"], "driver", value).value)
        except OAuthError as exc:
            outcomes.append(exc.error)

    threads = [threading.Thread(target=decide, args=(v,)) for v in ("grant", "deny")]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert outcomes.count(ALREADY_DECIDED) == 1
    assert len(set(outcomes) & {"granted", "denied"}) == 1


def test_stale_sessions_purged(auth_server, clock):
    old = start(auth_server)
    clock.advance(600 + 3600 + 1)
    start(auth_server)
    assert auth_server.session_for_device_code(old["device_code"]) is None


def test_no_token_without_prior_grant(auth_server, clock, trace):
    resp = start(auth_server)
    auth_server.record_decision(resp["user_code"], "driver", "grant")
    clock.advance(5)
    poll(auth_server, resp)
    kinds = [(e.kind, e.get("what")) for e in trace.events]
    assert kinds.index(("note", "decision")) < kinds.index(("commit", None))


# -- tokens ---------------------------------------------------------------------


def granted_token(server, clock) -> AccessToken:
    resp = start(server)
    server.record_decision(resp["user_code"], "driver", "grant")
    clock.advance(5)
    return poll(server, resp)


def test_token_payload(auth_server, clock):
    token = granted_token(auth_server, clock)
    assert token.subject == "driver" and token.client_id == CLIENT and token.scope == SCOPE
    parsed = AccessToken.from_wire(token.to_wire())
    assert parsed == token and parsed.verify(auth_server.public_key)


def test_token_bit_flips_fail(auth_server, clock):
    wire = granted_token(auth_server, clock).to_wire().encode("ascii")
    rng = SeededRandomSource("tok")
    for _ in range(200):
        i = rng.randbelow(len(wire))
        flipped = bytearray(wire)
        flipped[i] ^= 1 << rng.randbelow(7)
        try:
            tok = AccessToken.from_wire(bytes(flipped).decode("ascii"))
        except (ValueError, UnicodeDecodeError):
            continue
        assert not tok.verify(auth_server.public_key)


def test_issue_requires_grant(auth_server):
    resp = start(auth_server)
    session = auth_server.session_for_device_code(resp["device_code"])
    assert error_of(auth_server.issue_access_token, session, T0) == INVALID_GRANT


# -- resource owner side --------------------------------------------------------


def test_login(auth_server):
    cookie = auth_server.authenticate_user("driver", "pw")
    assert len(cookie) == 43
    assert auth_server.user_for_cookie(cookie) == "driver"


def test_login_failures_identical(auth_server):
    with pytest.raises(OAuthError) as wrong:
        auth_server.authenticate_user("driver", "bad")
    with pytest.raises(OAuthError) as unknown:
        auth_server.authenticate_user("nobody", "bad")
    assert wrong.value.to_body() == unknown.value.to_body()
    assert wrong.value.status == unknown.value.status == 401
    assert wrong.value.error == INVALID_CREDENTIALS


def test_no_plaintext_password():
    rec = UserRecord.create("u", "secret-pw", rng=SeededRandomSource(1), iterations=1000)
    assert "secret-pw" not in json.dumps(rec.to_dict())
    assert rec.check("secret-pw") and not rec.check("other")


def test_lookup_normalizes(auth_server, clock):
    resp = start(auth_server)
    code = UserCode(resp["user_code"]).code
    a = auth_server.lookup_by_user_code(code[:4] + "-" + code[4:])
    b = auth_server.lookup_by_user_code(code.lower())
    assert a == b and a.details == make_details()
    clock.advance(601)
    assert error_of(auth_server.lookup_by_user_code, code) == NOT_FOUND


def test_decisions(auth_server):
    resp = start(auth_server)
    assert auth_server.record_decision(resp["user_code"], "driver", "grant") is SessionState.GRANTED
    # repeating the same decision is idempotent
    assert auth_server.record_decision(resp["user_code"], "driver", "grant") is SessionState.GRANTED
    assert error_of(auth_server.record_decision, resp["user_code"], "driver", "deny") == ALREADY_DECIDED
    assert error_of(auth_server.record_decision, "BBBB-BBBB", "driver", "grant") == NOT_FOUND


# -- HTTP binding -----------------------------------------------------------------


def test_http_flow(auth_server, clock):
    da = auth_server.handle(form_request("/device_authorization", {
        "client_id": CLIENT, "scope": str(SCOPE), "authorization_details": json.dumps(details_list_to_wire(make_details())),
    }))
    assert da.status == 200
    body = da.json()
    token_form = {"grant_type": GT, "device_code": body["device_code"], "client_id": CLIENT}
    pending = auth_server.handle(form_request("/token", token_form))
    assert pending.status == 400 and pending.json()["error"] == AUTHORIZATION_PENDING

    login = auth_server.handle(form_request("/login", {"user_id": "driver", "password": "pw"}))
    cookie = login.header("Set-Cookie").split(";")[0]
    unauth = auth_server.handle(json_request("GET", "/verify?user_code=" + body["user_code"]))
    assert unauth.status == 401
    view = auth_server.handle(json_request("GET", "/verify?user_code=" + body["user_code"], headers=[("Cookie", cookie)]))
    assert view.status == 200 and view.json()["authorization_details"] == details_list_to_wire(make_details())
    req = form_request("/decision", {"user_code": body["user_code"], "decision": "grant"})
    req.headers.append(("Cookie", cookie))
    assert auth_server.handle(req).json() == {"status": "granted"}
    clock.advance(5)
    ok = auth_server.handle(form_request("/token", token_form))
    assert ok.status == 200 and ok.json()["token_type"] == "Bearer"
    clock.advance(5)
    assert auth_server.handle(form_request("/token", token_form)).json()["error"] == EXPIRED_TOKEN
    assert auth_server.handle(json_request("GET", "/public_key")).status == 200
    assert auth_server.handle(json_request("GET", "/nowhere")).status == 404


def test_http_malformed_details(auth_server):
    resp = auth_server.handle(form_request("/device_authorization", {
        "client_id": CLIENT, "scope": str(SCOPE), "authorization_details": "{not json",
    }))
    assert resp.status == 400 and resp.json()["error"] == INVALID_AUTHORIZATION_DETAILS


def test_journal(clock, rng, tmp_path):
    from pncoauth.hosting import FileJournal

    hsm = SoftHSM(rng, "as")
    path = tmp_path / "as.jsonl"
    server = AuthorizationServer(
        "emsp-a", hsm, hsm.generate_keypair(), clients=[CLIENT], verification_uri="https://as/verify",
        clock=clock, rng=rng, journal=FileJournal(path),
    )
    start(server)
    assert json.loads(path.read_text().splitlines()[0])["event"] == "device_authorization"
