from __future__ import annotations

import dataclasses
import itertools
from datetime import timedelta

import pytest

from pncoauth.core.canonical import b64url_encode
from pncoauth.core.httpwire import json_request
from pncoauth.core.model import Money, Scope
from pncoauth.core.runtime import SeededRandomSource, VirtualClock
from pncoauth.pki import Certificate, CertificateChain, SoftHSM, build_csr, validate_chain
from pncoauth.resourceserver import (
    DETAILS_MISMATCH,
    INSUFFICIENT_SCOPE,
    INVALID_CSR,
    INVALID_TOKEN,
    ResourceError,
    ResourceServer,
    ResourceServerConfig,
)
from pncoauth.tokens import AccessToken

from conftest import CLIENT, T0, Pki, make_details

NOW = T0


class Env:
    def __init__(self, trace=None):
        self.pki = Pki("rs")
        self.as_hsm = SoftHSM(SeededRandomSource("rs-as"), "as")
        self.as_key = self.as_hsm.generate_keypair()
        self.rs = ResourceServer(ResourceServerConfig("emsp-a", "emsp-a", self.as_key.public_key), self.pki.sub, events=trace)
        self.ev_hsm = SoftHSM(SeededRandomSource("rs-ev"), "ev")

    def token(self, details=None, scope="pnc:contract_cert", lifetime=300, issuer="emsp-a", key=None) -> str:
        unsigned = AccessToken(
            alg="ed25519", issuer=issuer, subject="driver", client_id=CLIENT, scope=Scope.parse(scope),
            authorization_details=details or make_details(), issued_at=NOW, expires_at=NOW + timedelta(seconds=lifetime),
            token_id=b64url_encode(b"\x01" * 16),
        )
        sig = (key or self.as_hsm).sign(self.as_key if key is None else key.generate_keypair(), unsigned.signing_input())
        return dataclasses.replace(unsigned, signature=sig.value).to_wire()

    def csr(self, details=None):
        h = self.ev_hsm.generate_keypair()
        return build_csr(self.ev_hsm, h, "ev-1", details or make_details()), h


@pytest.fixture
def env(trace):
    return Env(trace)


def error_of(env, token, csr_wire, now=NOW):
    with pytest.raises(ResourceError) as info:
        env.rs.handle_certificate_request(token, csr_wire, now)
    return info.value.error, info.value.status


def test_issue_matches_token(env, trace):
    csr, h = env.csr()
    cert, chain = env.rs.handle_certificate_request(env.token(), csr.to_wire(), NOW)
    assert cert.constraints == make_details() and cert.public_key == h.public_key
    assert validate_chain(cert, chain, env.pki.root.certificate, cert.not_before).ok
    commits = trace.of_kind("commit")
    assert [c.get("agreement") for c in commits] == ["install_request"]


def test_expired_token(env):
    csr, _ = env.csr()
    assert error_of(env, env.token(), csr.to_wire(), NOW + timedelta(seconds=300)) == (INVALID_TOKEN, 401)


def test_forged_and_foreign_tokens(env):
    csr, _ = env.csr()
    assert error_of(env, env.token(key=SoftHSM()), csr.to_wire()) == (INVALID_TOKEN, 401)
    assert error_of(env, env.token(issuer="emsp-b"), csr.to_wire()) == (INVALID_TOKEN, 401)
    assert error_of(env, "a.b", csr.to_wire()) == (INVALID_TOKEN, 401)


MUTATIONS = {
    "period_start": lambda d: dataclasses.replace(d, period_start=d.period_start - timedelta(days=1)),
    "period_end": lambda d: dataclasses.replace(d, period_end=d.period_end + timedelta(days=1)),
    "max_period_expenses": lambda d: dataclasses.replace(d, max_period_expenses=Money(d.max_period_expenses.cents + 1, "EUR")),
    "max_daily_expenses": lambda d: dataclasses.replace(d, max_daily_expenses=Money(d.max_daily_expenses.cents + 1, "EUR")),
}


@pytest.mark.parametrize("field", sorted(MUTATIONS))
def test_each_inflated_field_rejected(env, field):
    csr, _ = env.csr(MUTATIONS[field](make_details()))
    assert error_of(env, env.token(), csr.to_wire()) == (DETAILS_MISMATCH, 400)


def test_invalid_csr(env):
    csr, _ = env.csr()
    forged = dataclasses.replace(csr, self_signature=env.ev_hsm.sign(env.ev_hsm.generate_keypair(), csr.signed_bytes()))
    assert error_of(env, env.token(), forged.to_wire()) == (INVALID_CSR, 400)
    assert error_of(env, env.token(), "garbage") == (INVALID_CSR, 400)


OTHER_TOKENS = ["openid", "profile", "pnc:read"]


@pytest.mark.parametrize(
    "tokens",
    [c for n in range(1, 4) for c in itertools.combinations(["pnc:contract_cert", *OTHER_TOKENS], n)],
)
def test_scope_subsets(env, tokens):
    csr, _ = env.csr()
    token = env.token(scope=" ".join(tokens))
    if "pnc:contract_cert" in tokens:
        assert env.rs.handle_certificate_request(token, csr.to_wire(), NOW)[0].constraints == make_details()
    else:
        assert error_of(env, token, csr.to_wire()) == (INSUFFICIENT_SCOPE, 403)


def test_http_binding(env):
    csr, _ = env.csr()
    req = json_request("POST", "/contract_certificate", {"csr": csr.to_wire()}, headers=[("Authorization", "Bearer " + env.token())])
    env.rs.clock = VirtualClock(NOW)
    resp = env.rs.handle(req)
    assert resp.status == 201
    body = resp.json()
    cert = Certificate.from_wire(body["certificate"])
    assert CertificateChain.from_wire(body["chain"]).root == env.pki.root.certificate
    assert cert.subject == "ev-1"

    no_auth = env.rs.handle(json_request("POST", "/contract_certificate", {"csr": csr.to_wire()}))
    assert no_auth.status == 401 and no_auth.json()["error"] == INVALID_TOKEN
    assert "Bearer" in (no_auth.header("WWW-Authenticate") or "")
    bad_body = env.rs.handle(json_request("POST", "/contract_certificate", {"x": 1}, headers=[("Authorization", "Bearer t.t.t")]))
    assert bad_body.status in (400, 401)
    assert env.rs.handle(json_request("GET", "/contract_certificate")).status == 404


def test_constraints_come_from_token_not_csr(env):
    # matching is required, so a CSR can never widen what the token grants
    narrow = make_details(period="50.00", daily="10.00")
    csr, _ = env.csr(narrow)
    assert error_of(env, env.token(make_details()), csr.to_wire())[0] == DETAILS_MISMATCH
    cert, _ = env.rs.handle_certificate_request(env.token(narrow), csr.to_wire(), NOW)
    assert cert.constraints == narrow
