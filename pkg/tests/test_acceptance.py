"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line and then asserts."""

from __future__ import annotations

import json
import os
import statistics
import subprocess
import sys
import time
from datetime import timedelta

from pncoauth.chargepoint import CURRENCY_MISMATCH, DAILY_CAP, PERIOD_CAP, ExpenseLedger
from pncoauth.core.httpwire import form_request
from pncoauth.core.model import Money, details_list_to_wire
from pncoauth.core.runtime import SeededRandomSource, SystemClock
from pncoauth.pki import SoftHSM, build_csr
from pncoauth.resourceserver import ResourceServer, ResourceServerConfig
from pncoauth.sim import Scenario, Trace, run_scenario
from pncoauth.sim.adversary import TAMPER_FIELDS
from pncoauth.tokens import AccessToken
from pncoauth.useragent import Verdict
from pncoauth.vehicle import EvState, PollOutcome

from conftest import AS_BASE, CLIENT, SCOPE, Pki, World, make_details, report
from test_chargepoint import oracle_decisions

BYTE_BOUND = 8686

def sim_cli(*args: str, env: dict | None = None) -> subprocess.CompletedProcess:
    code = "import sys; from pncoauth.cli import sim_main; sys.exit(sim_main())"
    return subprocess.run([sys.executable, "-c", code, *args], capture_output=True, text=True, env=env, timeout=120)

# 1 -------------------------------------------------------------------------------

def test_criterion_1_happy_path(tmp_path):
    trace_path = tmp_path / "happy.jsonl"
    started = time.perf_counter()
    proc = sim_cli("run", "--scenario", "happy", "--check", "all", "--trace", str(trace_path))
    wall = time.perf_counter() - started
    summary = json.loads(proc.stdout)
    checks = summary["checks"]
    # the in-process run gives direct access to the certificate for the byte comparison
    result = run_scenario(Scenario())
    byte_equal = result.certificate.constraints.canonical() == result.submitted_details.canonical()
    ok = (
        proc.returncode == 0
        and summary["ev_state"] == "Credentialed"
        and checks["expect:constraints_equal_submitted"]
        and byte_equal
        and summary["cp"] == "authorized"
        and checks["injective_agreement"] and checks["weaker_properties"] and checks["oracle_implementations_agree"]
        and wall < 5.0
    )
    report(1, ok, f"exit={proc.returncode} state={summary['ev_state']} cp={summary['cp']} "
                  f"constraints_byte_equal={byte_equal} wall={wall:.2f}s (<5s)")
    assert ok

# 2 -------------------------------------------------------------------------------

def test_criterion_2_injective_agreement():
    presets = ("mitm_pairing", "session_swap", "token_replay")
    runs, bad = 1002, []
    for seed in range(runs):
        preset = presets[seed % 3]
        result = run_scenario(Scenario(f"agree-{preset}", seed, adversary=preset, randomize=True))
        if result.oracle.counterexamples or not result.oracle.consistent:
            bad.append((seed, preset))
    mutants = {}
    for mutation, preset in (("as_no_single_use", "token_replay"), ("ev_no_chain_validation", "rogue_ca")):
        found = 0
        for seed in range(10):
            found += len(run_scenario(Scenario("mutant", seed, adversary=preset, mutations=[mutation])).oracle.counterexamples)
        mutants[mutation] = found
    ok = not bad and all(n >= 1 for n in mutants.values())
    report(2, ok, f"{runs} honest randomized runs, counterexamples in {len(bad)}; mutant counterexamples {mutants}")
    assert ok, bad[:5]

# 3 -------------------------------------------------------------------------------

def test_criterion_3_polling_semantics(clock, trace):
    seen: set[str] = set()

    def watch(world):
        inner = world.handlers[AS_BASE]

        def handler(request):
            response = inner(request)
            if request.path == "/token" and response.status != 200:
                seen.add(response.json()["error"])
            return response

        world.handlers[AS_BASE] = handler
        return world

    # pending, then slow_down after a too-early poll, then token
    w = watch(World(clock, trace))
    w.submit()
    pending = w.ev.pending
    clock.advance(5)
    first = w.ev.poll_once()
    pending.interval = 3  # a misbehaving client polls early
    clock.advance(3)
    slowed = w.ev.poll_once()
    backoff = pending.interval - 5
    clock.advance(9)
    early = w.ev.poll_once()
    clock.advance(1)
    after = w.ev.poll_once()
    gap = (pending.poll_times[-1] - pending.poll_times[-2]).total_seconds()
    w.approve()
    clock.advance(10)
    granted = w.ev.poll_once()
    flow_ok = (first, slowed, early, after, granted) == (
        PollOutcome.PENDING, PollOutcome.SLOW_DOWN, PollOutcome.TOO_EARLY, PollOutcome.PENDING, PollOutcome.TOKEN
    ) and w.ev.state is EvState.TOKEN_HELD

    # expired_token once 600 s have passed
    w2 = watch(World(clock, trace))
    w2.submit()
    clock.advance(601)
    w2.ev.pending.deadline += timedelta(seconds=60)  # let the request reach the AS
    expired = w2.ev.poll_once()

    # access_denied after deny
    w3 = watch(World(clock, trace))
    w3.submit()
    w3.approve("deny")
    clock.advance(5)
    denied = w3.ev.poll_once()

    names = {"authorization_pending", "slow_down", "expired_token", "access_denied"}
    ok = flow_ok and backoff == 5 and gap == 10 and expired is PollOutcome.EXPIRED and denied is PollOutcome.DENIED and seen == names
    report(3, ok, f"error names exercised {sorted(seen)}; slow_down backoff +{backoff}s, next poll gap {gap:.0f}s")
    assert ok

# 4 -------------------------------------------------------------------------------

def test_criterion_4_rar_enforcement():
    rng = SeededRandomSource("acceptance-4")
    disagreements = 0
    hits = {DAILY_CAP: 0, PERIOD_CAP: 0, CURRENCY_MISMATCH: 0, "boundary": 0}
    for i in range(500):
        daily = 100 * (1 + rng.randbelow(50))
        period = daily * (1 + rng.randbelow(6))
        caps = make_details(period=Money(period, "EUR").amount, daily=Money(daily, "EUR").amount)
        costs = []
        for _ in range(1 + rng.randbelow(25)):
            cents = rng.choice([daily, daily // 2, daily - 1, daily + 1, rng.randbelow(daily + 1)])
            costs.append((rng.randbelow(7), cents, "EUR" if rng.randbelow(10) else "USD"))
        ledger = ExpenseLedger()
        got = [
            ledger.authorize_session_cost(i, caps, Money(c, cur), caps.period_start.date() + timedelta(days=d)).reason
            for d, c, cur in costs
        ]
        want = oracle_decisions(costs, daily, period)
        disagreements += got != want
        for reason in got:
            if reason in hits:
                hits[reason] += 1
        # a permitted cost that lands exactly on a cap exercises the inclusive boundary
        spent: dict[int, int] = {}
        for (d, c, cur), reason in zip(costs, got):
            if reason is None:
                spent[d] = spent.get(d, 0) + c
                hits["boundary"] += c > 0 and (spent[d] == daily or sum(spent.values()) == period)
    ok = disagreements == 0 and all(hits.values())
    report(4, ok, f"500 cost sequences, {disagreements} disagreements with brute-force oracle; cases hit {hits}")
    assert ok

# 5 -------------------------------------------------------------------------------

def test_criterion_5_tamper_detection():
    denied: dict[str, int] = {}
    for field in TAMPER_FIELDS:
        denied[field] = 0
        for seed in range(100):
            result = run_scenario(
                Scenario("tamper", seed, adversary="details_tamper_ev", adversary_params={"field": field}, charge=False)
            )
            denied[field] += (
                bool(result.reviews)
                and all(r.verdict is Verdict.DENY for r in result.reviews)
                and result.token_commits == 0
                and result.ev_state != "Credentialed"
            )
    swaps = 0
    for seed in range(100):
        result = run_scenario(Scenario("swap", seed, adversary="session_swap", charge=False))
        swaps += result.reviews[0].verdict is Verdict.DENY and "token" not in result.attacker_outcomes
    ok = all(n == 100 for n in denied.values()) and swaps == 100
    report(5, ok, f"details_tamper_ev denied per field {denied}; session_swap denied {swaps}/100")
    assert ok

# 6 -------------------------------------------------------------------------------

def test_criterion_6_wire_overhead():
    result = run_scenario(Scenario())
    spread = [run_scenario(Scenario("r", s, randomize=True, charge=False)).bytes_ev_emsp for s in range(20)]
    ok = result.bytes_ev_emsp <= BYTE_BOUND
    report(
        6, ok,
        f"EV<->EMSP application bytes per authorization = {result.bytes_ev_emsp} (bound {BYTE_BOUND}); "
        f"including UA<->AS and paired link = {result.bytes_authorization_total}; "
        f"randomized review delays: min {min(spread)} median {int(statistics.median(spread))} max {max(spread)}",
    )
    assert ok

# 7 -------------------------------------------------------------------------------

def test_criterion_7_local_processing_time(auth_server):
    auth_server.clock = SystemClock()
    details = make_details(start=SystemClock().now().replace(microsecond=0), days=30)
    body = {"client_id": CLIENT, "scope": str(SCOPE), "authorization_details": json.dumps(details_list_to_wire(details))}
    auth_times = []
    for _ in range(100):
        request = form_request("/device_authorization", body)
        t = time.perf_counter()
        response = auth_server.handle(request)
        auth_times.append(time.perf_counter() - t)
        assert response.status == 200

    pki = Pki("acceptance-7")
    rs = ResourceServer(ResourceServerConfig("emsp-a", "emsp-a", auth_server.public_key), pki.sub, clock=SystemClock())
    ev_hsm = SoftHSM(SeededRandomSource("acceptance-7-ev"))
    session = auth_server._sessions[next(iter(auth_server._sessions))]
    auth_server.record_decision(session.user_code, "driver", "grant")
    token = auth_server.issue_access_token(session, SystemClock().now()).to_wire()
    issue_times = []
    for _ in range(100):
        csr = build_csr(ev_hsm, ev_hsm.generate_keypair(), "ev-1", details).to_wire()
        t = time.perf_counter()
        rs.handle_certificate_request(token, csr, SystemClock().now())
        issue_times.append(time.perf_counter() - t)
    assert AccessToken.from_wire(token).authorization_details == details

    ms = lambda xs: 1000 * statistics.mean(xs)
    p95 = lambda xs: 1000 * sorted(xs)[94]
    ok = ms(auth_times) < 50 and ms(issue_times) < 100
    report(7, ok, f"device_authorization mean {ms(auth_times):.2f} ms p95 {p95(auth_times):.2f} ms (<50); "
                  f"certificate issuance mean {ms(issue_times):.2f} ms p95 {p95(issue_times):.2f} ms (<100)")
    assert ok

# 8 -------------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    cases = [
        ("happy", 0, []), ("mitm_pairing", 5, []), ("session_swap", 6, []), ("token_replay", 7, []),
        ("details_tamper_ev", 8, []), ("rogue_ca", 9, []), ("drop_all", 10, []),
        ("token_replay", 11, ["as_no_single_use"]), ("rogue_ca", 12, ["ev_no_chain_validation"]),
    ]
    diffs = []
    for name, seed, mutations in cases:
        traces = []
        for attempt, hashseed in enumerate(("1", "2")):
            path = tmp_path / f"{name}-{seed}-{attempt}.jsonl"
            args = ["run", "--scenario", name, "--seed", str(seed), "--trace", str(path)]
            for m in mutations:
                args += ["--mutation", m]
            sim_cli(*args, env={**os.environ, "PYTHONHASHSEED": hashseed})
            traces.append(path.read_bytes())
        if traces[0] != traces[1] or not traces[0]:
            diffs.append((name, seed))
        Trace.from_jsonl(traces[0].decode())
    ok = not diffs
    report(8, ok, f"{len(cases)} scenarios (2 failing by design) rerun in fresh processes, byte-identical traces: "
                  f"{len(cases) - len(diffs)}/{len(cases)}")
    assert ok, diffs
