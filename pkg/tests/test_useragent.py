from __future__ import annotations

import json
from datetime import timedelta

import pytest

from pncoauth.authserver import SessionState
from pncoauth.core.model import details_list_to_wire
from pncoauth.useragent import ApprovalPolicy, UaError, Verdict

from conftest import AS_BASE, World, make_details


@pytest.fixture
def world(clock, trace):
    w = World(clock, trace)
    w.submit()
    return w


def session_state(world):
    return world.auth._live_session(world.ua.ticket.user_code, world.clock.now()).state


def review(world, *, code=None, shown=None, policy=None, interactive=False):
    code = code or world.ua.ticket.user_code.display
    shown = world.ev.displayed_user_code if shown is None else shown
    return world.ua.verify_and_decide(AS_BASE, code, shown, policy, interactive)


def test_match_grants(world):
    result = review(world, policy=ApprovalPolicy(make_details()))
    assert result.verdict is Verdict.GRANT and result.reasons == ()
    assert session_state(world) is SessionState.GRANTED


def test_user_code_mismatch_denies(world):
    result = review(world, shown="BBBB-BBBB", policy=ApprovalPolicy(make_details()))
    assert result.verdict is Verdict.DENY
    assert "user code differs from the vehicle display" in result.reasons
    assert session_state(world) is SessionState.DENIED


def test_missing_display_denies(world):
    world.ev.display_lines.clear()
    result = world.ua.verify_and_decide(AS_BASE, world.ua.ticket.user_code, None, ApprovalPolicy(make_details()))
    assert result.verdict is Verdict.DENY


def test_details_mismatch_denies(world):
    result = review(world, policy=ApprovalPolicy(make_details(period="150.00")))
    assert result.verdict is Verdict.DENY
    assert result.reasons == ("authorization details differ from what was entered",)


def test_no_policy_denies(world):
    result = review(world)
    assert result.verdict is Verdict.DENY and result.reasons == ("no approval policy",)


def test_policy_deny_on_match(world):
    result = review(world, policy=ApprovalPolicy(make_details(), decision_on_match=Verdict.DENY))
    assert result.verdict is Verdict.DENY


@pytest.mark.parametrize("answer,verdict", [("y", Verdict.GRANT), ("yes", Verdict.GRANT), ("", Verdict.DENY), ("n", Verdict.DENY)])
def test_interactive(world, answer, verdict):
    lines: list[str] = []
    world.ua.prompt = lambda _: answer
    world.ua.output = lines.append
    assert review(world, interactive=True).verdict is verdict
    assert any(line.startswith("Details:") for line in lines)


def test_interactive_mismatch_never_prompts(world):
    world.ua.prompt = lambda _: pytest.fail("prompted despite mismatch")
    world.ua.expected_details = make_details(daily="1.00")
    assert review(world, interactive=True).verdict is Verdict.DENY


def test_unknown_code(world):
    with pytest.raises(UaError) as info:
        review(world, code="ZZZZ-ZZZZ", policy=ApprovalPolicy(make_details()))
    assert info.value.code == "not_found"


def test_bad_password(clock, trace):
    w = World(clock, trace)
    w.submit()
    w.ua.password = "wrong"
    with pytest.raises(UaError) as info:
        review(w, policy=ApprovalPolicy(make_details()))
    assert info.value.code == "login_failed"


def test_expired_session_not_found(world, clock):
    clock.advance(601)
    with pytest.raises(UaError):
        review(world, policy=ApprovalPolicy(make_details()))


def test_local_validation_before_sending(clock, trace):
    w = World(clock, trace)
    w.pair()
    bad = make_details(start=clock.now() - timedelta(days=60))
    with pytest.raises(UaError) as info:
        w.ua.configure_and_submit("emsp-a", bad)
    assert info.value.code == "invalid_authorization_details"
    assert not [b for base, b in w.sent if base == AS_BASE]


def test_policy_cannot_grant_on_mismatch():
    with pytest.raises(ValueError):
        ApprovalPolicy(make_details(), decision_on_mismatch=Verdict.GRANT)
    with pytest.raises(ValueError):
        ApprovalPolicy.from_dict({"decision_on_mismatch": "grant"})
    with pytest.raises(ValueError):
        ApprovalPolicy.from_dict({"expected_user_code_source": "typed"})
    with pytest.raises(ValueError):
        ApprovalPolicy.from_dict({"auto": True})


def test_policy_file_forms(tmp_path):
    wire = details_list_to_wire(make_details())
    for body in (wire, wire[0]):
        path = tmp_path / "policy.json"
        path.write_text(json.dumps({"expected_details": body, "decision_on_match": "grant"}))
        policy = ApprovalPolicy.from_file(path)
        assert policy.expected_details == make_details() and policy.decision_on_match is Verdict.GRANT
