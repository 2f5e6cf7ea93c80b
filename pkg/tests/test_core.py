from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings, strategies as st

from pncoauth.core.canonical import CanonicalError, b64url_decode, b64url_encode, canonical_decode, canonical_encode
from pncoauth.core.httpwire import HttpRequest, HttpResponse, form_request, json_request
from pncoauth.core.model import (
    AuthorizationDetails,
    Money,
    Scope,
    UserCode,
    details_from_list,
    details_list_to_wire,
    is_device_code,
    new_device_code,
    normalize_user_code,
    validate_authorization_details,
)
from pncoauth.core.runtime import SeededRandomSource, VirtualClock

from conftest import make_details

UTC = timezone.utc


# -- independent oracle for the canonical encoding ---------------------------

_ESCAPES = {'"': '\\"', "\\": "\\\\", "\b": "\\b", "\f": "\\f", "\n": "\\n", "\r": "\\r", "\t": "\\t"}


def _oracle_str(s: str) -> str:
    out = []
    for ch in s:
        if ch in _ESCAPES:
            out.append(_ESCAPES[ch])
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return '"' + "".join(out) + '"'


def oracle_encode(v) -> bytes:
    def enc(x) -> str:
        if x is None:
            return "null"
        if x is True:
            return "true"
        if x is False:
            return "false"
        if isinstance(x, int):
            return str(x)
        if isinstance(x, str):
            return _oracle_str(x)
        if isinstance(x, list):
            return "[" + ",".join(enc(i) for i in x) + "]"
        if isinstance(x, dict):
            return "{" + ",".join(_oracle_str(k) + ":" + enc(x[k]) for k in sorted(x)) + "}"
        raise TypeError(type(x))

    return enc(v).encode("utf-8")


text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12)
values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2**63), 2**63) | text,
    lambda children: st.lists(children, max_size=5) | st.dictionaries(text, children, max_size=5),
    max_leaves=25,
)


def test_key_order_independent():
    assert canonical_encode({"b": 1, "a": 2}) == canonical_encode({"a": 2, "b": 1})


def test_empty_object():
    assert canonical_encode({}) == b"{}"


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), {1: "x"}, b"bytes", {"s": {1, 2}}])
def test_rejects_unencodable(bad):
    with pytest.raises(CanonicalError):
        canonical_encode(bad)


@pytest.mark.parametrize("data", [b'{"b":1,"a":2}', b'{ "a":1}', b'{"a":1,"a":2}', b"NaN", b"\xff"])
def test_decode_rejects_non_canonical(data):
    with pytest.raises(CanonicalError):
        canonical_decode(data)


@settings(max_examples=1000, deadline=None)
@given(values)
def test_roundtrip_matches_oracle(value):
    encoded = canonical_encode(value)
    assert encoded == oracle_encode(value)
    assert canonical_encode(canonical_decode(encoded)) == encoded


@settings(max_examples=300, deadline=None)
@given(values, values)
def test_injective(a, b):
    if canonical_encode(a) == canonical_encode(b):
        assert a == b


@given(st.binary(max_size=64))
def test_b64url_roundtrip(raw):
    text_ = b64url_encode(raw)
    assert "=" not in text_
    assert b64url_decode(text_) == raw


def test_b64url_strict():
    with pytest.raises(ValueError):
        b64url_decode("AA==")


# -- authorization details ----------------------------------------------------


def test_validate_example_ok():
    d = make_details(datetime(2025, 1, 1, tzinfo=UTC), days=30)
    assert validate_authorization_details(d, datetime(2025, 1, 2, tzinfo=UTC)).ok


def test_validate_empty_period():
    d = make_details(days=0)
    assert "empty period" in validate_authorization_details(d, datetime(2024, 6, 1, tzinfo=UTC)).violations


def test_validate_daily_exceeds_period():
    d = make_details(period="100.00", daily="200.00")
    assert "daily exceeds period cap" in validate_authorization_details(d, datetime(2025, 1, 2, tzinfo=UTC)).violations


def test_validate_currency_mismatch():
    d = AuthorizationDetails(
        datetime(2025, 1, 1, tzinfo=UTC), datetime(2025, 2, 1, tzinfo=UTC),
        Money.parse("100.00", "EUR"), Money.parse("25.00", "USD"),
    )
    assert "currency mismatch" in validate_authorization_details(d, datetime(2025, 1, 2, tzinfo=UTC)).violations


def test_validate_reports_all_violations_without_raising():
    d = AuthorizationDetails(
        datetime(2025, 2, 1, tzinfo=UTC), datetime(2025, 1, 1, tzinfo=UTC),
        Money.parse("1.00", "EUR"), Money.parse("2.00", "EUR"), detail_type="other",
    )
    assert len(validate_authorization_details(d, datetime(2026, 1, 1, tzinfo=UTC)).violations) == 4


@settings(max_examples=200, deadline=None)
@given(
    start=st.integers(0, 10**8),
    length=st.integers(1, 10**7),
    probe=st.integers(-(10**7), 2 * 10**7),
    daily=st.integers(0, 10**6),
    extra=st.integers(0, 10**6),
)
def test_validity_switches_exactly_at_period_end(start, length, probe, daily, extra):
    base = datetime(2020, 1, 1, tzinfo=UTC) + timedelta(seconds=start)
    d = AuthorizationDetails(base, base + timedelta(seconds=length), Money(daily + extra, "EUR"), Money(daily, "EUR"))
    t = d.period_start + timedelta(seconds=probe)
    assert validate_authorization_details(d, t).ok == (t < d.period_end)


def test_wire_shape():
    d = make_details()
    assert d.to_wire() == {
        "type": "pnc_contract_provisioning",
        "authorization_period": {"start": "2025-01-01T00:00:00Z", "end": "2025-01-31T00:00:00Z"},
        "max_period_expenses": {"amount": "100.00", "currency": "EUR"},
        "max_daily_expenses": {"amount": "25.00", "currency": "EUR"},
    }
    assert details_from_list(details_list_to_wire(d)) == d


@pytest.mark.parametrize(
    "mutate",
    [
        lambda w: w.pop("max_daily_expenses"),
        lambda w: w.update(extra=1),
        lambda w: w["authorization_period"].update(start="2025-01-01T00:00:00.5Z"),
        lambda w: w["authorization_period"].update(start="2025-01-01T01:00:00+01:00"),
        lambda w: w["max_period_expenses"].update(amount="100.0"),
        lambda w: w["max_period_expenses"].update(amount="-1.00"),
        lambda w: w["max_period_expenses"].update(currency="eur"),
    ],
)
def test_from_wire_rejects(mutate):
    wire = make_details().to_wire()
    mutate(wire)
    with pytest.raises(ValueError):
        AuthorizationDetails.from_wire(wire)


def test_details_list_must_hold_one_entry():
    w = make_details().to_wire()
    for bad in ([], [w, w], w):
        with pytest.raises(ValueError):
            details_from_list(bad)


@given(st.integers(0, 10**12))
def test_money_wire_roundtrip(cents):
    m = Money(cents, "EUR")
    assert Money.from_wire(m.to_wire()) == m


def test_scope():
    s = Scope.parse("pnc:contract_cert openid")
    assert "pnc:contract_cert" in s and str(s) == "pnc:contract_cert openid"
    assert s.covers(Scope.of("pnc:contract_cert"))
    with pytest.raises(ValueError):
        Scope.of("Bad Token")


# -- codes --------------------------------------------------------------------


def test_user_code_normalization():
    assert UserCode("BCDF-GHJK") == UserCode("bcdfghjk")
    assert UserCode("bcdfghjk").display == "BCDF-GHJK"
    for bad in ("BCDF-GHJ", "ABCD-EFGH", "BCDF-GHJK1"):
        with pytest.raises(ValueError):
            normalize_user_code(bad)


def test_user_code_generation_uses_alphabet():
    rng = SeededRandomSource(1)
    for _ in range(200):
        code = UserCode.generate(rng)
        assert len(code.code) == 8 and set(code.code) <= set("BCDFGHJKLMNPQRSTVWXZ")


def test_device_code_shape():
    code = new_device_code(SeededRandomSource(2))
    assert len(code) == 43 and is_device_code(code)
    assert not is_device_code(code[:-1])


# -- runtime and wire helpers -------------------------------------------------


def test_virtual_clock():
    clock = VirtualClock(datetime(2025, 1, 1, tzinfo=UTC))
    clock.sleep(5.5)
    assert clock.now() == datetime(2025, 1, 1, 0, 0, 5, tzinfo=UTC)
    assert clock.monotonic() == 5.5
    with pytest.raises(ValueError):
        clock.advance(-1)


def test_seeded_rng_forks_are_reproducible():
    a, b = SeededRandomSource(7), SeededRandomSource(7)
    assert a.fork("x").token_bytes(16) == b.fork("x").token_bytes(16)
    assert a.fork("x").token_bytes(16) != a.fork("y").token_bytes(16)


def test_http_roundtrip():
    req = form_request("/token", {"a": "1 2", "b": "é"}, host="as.example")
    parsed = HttpRequest.parse(req.to_bytes())
    assert parsed.form() == {"a": "1 2", "b": "é"}
    assert parsed.header("host") == "as.example"
    resp = HttpResponse.parse(HttpResponse(201, [("Content-Type", "application/json")], b'{"x":1}').to_bytes())
    assert resp.status == 201 and resp.json() == {"x": 1}
    assert HttpRequest.parse(json_request("POST", "/p", {"k": [1]}).to_bytes()).json() == {"k": [1]}
