"""Scenario definition and the deterministic runner.

A run builds one EMSP (authorization server, resource server, two-level
CA), one vehicle, the driver's user agent and a charge point, wires them
through the simulated network, and plays the provisioning flow followed by
a charging session on a virtual clock.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any

from ..authserver import AuthorizationServer, UserRecord
from ..chargepoint import ChargePoint, CostDecision, PncVerdict, ReceiptVerdict
from ..core.model import AuthorizationDetails, Money, format_timestamp, parse_timestamp
from ..core.runtime import SeededRandomSource, VirtualClock
from ..pairing import PairingError, PairingOffer
from ..pki import CertificateAuthority, Certificate, SoftHSM
from ..resourceserver import ResourceServer, ResourceServerConfig
from ..useragent import ApprovalPolicy, Review, UaError, UserAgent, Verdict
from ..vehicle import ElectricVehicle, EmspDescriptor, EvError, EvState
from .adversary import (
    TAMPER_FIELDS,
    DropAll,
    MaliciousVehicle,
    MitmPairing,
    RogueCa,
    SessionSwapAttacker,
    TokenReplay,
)
from .channels import PAIRED_SYMMETRIC, SERVER_AUTH, Adversary, Network
from .oracle import OracleVerdict, check_all
from .scheduler import ActorFailure, Scheduler
from .trace import Trace

PRESETS = ("none", "mitm_pairing", "session_swap", "details_tamper_ev", "rogue_ca", "token_replay", "drop_all")
MUTATIONS = ("as_no_single_use", "ev_no_chain_validation")

EMSP_ID = "emsp-a"
EV_ID = "ev-1"
CLIENT_ID = "oem-pnc-app"
CP_ID = "cp-1"
UA_ID = "ua-1"
USER_ID = "driver"
PASSWORD = "correct horse battery staple"
AS_BASE = "https://as.emsp-a.example"
RS_BASE = "https://rs.emsp-a.example"
CP_BASE = "https://cp-1.example"

PAIRING_ATTEMPTS = 3


class ScenarioError(RuntimeError):
    """An actor failed unexpectedly; carries the trace recorded so far."""

    def __init__(self, message: str, trace: Trace) -> None:
        super().__init__(message)
        self.trace = trace


@dataclass
class Scenario:
    name: str = "happy"
    seed: int = 0
    adversary: str = "none"
    adversary_params: dict[str, Any] = field(default_factory=dict)
    mutations: list[str] = field(default_factory=list)
    details: dict[str, Any] | None = None
    randomize: bool = False
    review_delay: float = 12.0
    key_alg: str = "ed25519"
    start: str = "2025-01-01T08:00:00Z"
    session_costs: list[str] = field(default_factory=lambda: ["12.50"])
    meter_readings: list[int] = field(default_factory=lambda: [1500, 7200, 11800])
    charge: bool = True
    max_time: float = 3600.0

    def __post_init__(self) -> None:
        if self.adversary not in PRESETS:
            raise ValueError(f"unknown adversary preset {self.adversary!r}; choose from {PRESETS}")
        unknown = set(self.mutations) - set(MUTATIONS)
        if unknown:
            raise ValueError(f"unknown mutations {sorted(unknown)}")

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown scenario fields {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def builtin_scenario(name: str, seed: int = 0) -> Scenario:
    if name == "happy":
        return Scenario("happy", seed)
    if name == "random":
        return Scenario("random", seed, randomize=True)
    if name in PRESETS and name != "none":
        return Scenario(name, seed, adversary=name)
    raise KeyError(name)


def load_scenario(name_or_path: str, seed: int | None = None) -> Scenario:
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        scenario = Scenario.from_file(path)
    else:
        scenario = builtin_scenario(name_or_path)
    if seed is not None:
        scenario.seed = seed
    return scenario


def randomized(base: Scenario, rng: SeededRandomSource) -> Scenario:
    """Vary the free parameters of ``base`` from the seed."""
    days_ahead = rng.randbelow(3)
    length = 1 + rng.randbelow(90)
    currency = rng.choice(["EUR", "USD", "CHF"])
    daily = 100 * (5 + rng.randbelow(46))
    period = daily * (1 + rng.randbelow(30))
    start = parse_timestamp(base.start) + timedelta(days=days_ahead, hours=rng.randbelow(24))
    details = AuthorizationDetails(
        start, start + timedelta(days=length), Money(period, currency), Money(daily, currency)
    )
    params = dict(base.adversary_params)
    if base.adversary == "mitm_pairing":
        params.setdefault("attempts", 1 + rng.randbelow(2))
    if base.adversary == "details_tamper_ev":
        params.setdefault("field", rng.choice(list(TAMPER_FIELDS)))
    cost = 100 + rng.randbelow(daily)
    return Scenario(
        name=base.name,
        seed=base.seed,
        adversary=base.adversary,
        adversary_params=params,
        mutations=list(base.mutations),
        details=details.to_wire(),
        randomize=False,
        review_delay=float(3 + rng.randbelow(118)),
        key_alg=rng.choice(["ed25519", "ed25519", "ecdsa-p256-sha256"]),
        start=base.start,
        session_costs=[Money(cost, currency).amount],
        meter_readings=list(base.meter_readings),
        charge=base.charge,
        max_time=base.max_time,
    )


def default_details(start: datetime) -> AuthorizationDetails:
    return AuthorizationDetails(
        start, start + timedelta(days=30), Money.parse("100.00", "EUR"), Money.parse("25.00", "EUR")
    )


@dataclass
class ScenarioResult:
    scenario: Scenario
    trace: Trace
    ev_state: str
    certificate: Certificate | None
    submitted_details: AuthorizationDetails
    reviews: list[Review]
    cp_verdict: PncVerdict | None
    cost_decisions: list[CostDecision]
    receipt_results: list[ReceiptVerdict]
    errors: list[str]
    bytes_ev_emsp: int
    bytes_authorization_total: int
    adversary_name: str
    adversary_log: list[str]
    attacker_outcomes: list[str]
    token_commits: int
    pairing_failures: int
    wall_seconds: float
    _oracle: OracleVerdict | None = None

    @property
    def oracle(self) -> OracleVerdict:
        if self._oracle is None:
            self._oracle = check_all(self.trace)
        return self._oracle

    @property
    def constraints_match(self) -> bool:
        return (
            self.certificate is not None
            and self.certificate.constraints is not None
            and self.certificate.constraints.canonical() == self.submitted_details.canonical()
        )

    def expectations(self) -> dict[str, bool]:
        """Outcome each preset is documented to produce, for honest builds."""
        s = self.scenario
        credentialed = self.ev_state == EvState.CREDENTIALED.value
        charged = self.cp_verdict is not None and self.cp_verdict.authorized
        if s.mutations:
            return {}
        if s.adversary in ("none", "mitm_pairing", "session_swap"):
            out = {
                "ev_credentialed": credentialed,
                "constraints_equal_submitted": self.constraints_match,
                "cp_authorized": charged or not s.charge,
                # guards against a silent event sink making the oracle vacuous
                "all_agreements_committed": all(
                    any(e.get("agreement") == k for e in self.trace.of_kind("commit"))
                    for k in ("token", "install_request", "install_response")
                ),
            }
            if s.adversary == "session_swap":
                out["phished_session_denied"] = bool(self.reviews) and self.reviews[0].verdict is Verdict.DENY
                out["attacker_got_no_token"] = "token" not in self.attacker_outcomes and bool(self.attacker_outcomes)
            if s.adversary == "mitm_pairing":
                out["mitm_pairing_rejected"] = self.pairing_failures >= 1
            return out
        if s.adversary == "details_tamper_ev":
            return {
                "ua_denied": bool(self.reviews) and all(r.verdict is Verdict.DENY for r in self.reviews),
                "no_token_issued": self.token_commits == 0,
                "ev_not_credentialed": not credentialed,
            }
        if s.adversary == "rogue_ca":
            return {"ev_rejected_rogue_certificate": not credentialed}
        if s.adversary == "token_replay":
            return {
                "single_token_issued": self.token_commits == 1,
                "ev_not_credentialed": not credentialed,
                "ev_saw_expired_token": any("expired" in e for e in self.errors),
            }
        if s.adversary == "drop_all":
            return {
                "ev_reports_as_unreachable": any("as_unreachable" in e for e in self.errors),
                "no_commits": not self.trace.of_kind("commit"),
            }
        return {}

    def checks(self) -> dict[str, bool]:
        verdict = self.oracle
        out = {
            "injective_agreement": not verdict.counterexamples,
            "oracle_implementations_agree": verdict.consistent,
            "weaker_properties": verdict.properties.all_hold,
        }
        out.update({f"expect:{k}": v for k, v in self.expectations().items()})
        return out

    @property
    def ok(self) -> bool:
        return all(self.checks().values())

    def summary(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "adversary": self.adversary_name,
            "mutations": self.scenario.mutations,
            "ev_state": self.ev_state,
            "certificate_serial": self.certificate.serial if self.certificate else None,
            "cp": None if self.cp_verdict is None else (self.cp_verdict.reason or "authorized"),
            "reviews": [r.verdict.value for r in self.reviews],
            "errors": self.errors,
            "bytes_ev_emsp": self.bytes_ev_emsp,
            "bytes_authorization_total": self.bytes_authorization_total,
            "counterexamples": [
                {"agreement": c.agreement, "commit_seq": c.commit_seq, "reason": c.reason}
                for c in self.oracle.counterexamples
            ],
            "checks": self.checks(),
        }


def _adversary_for(scenario: Scenario, rng: SeededRandomSource) -> Adversary:
    params = scenario.adversary_params
    if scenario.adversary == "mitm_pairing":
        return MitmPairing(rng.fork("mitm"), attempts=int(params.get("attempts", 1)))
    if scenario.adversary == "token_replay":
        return TokenReplay(EV_ID, AS_BASE, threshold=int(params.get("threshold", 700)))
    if scenario.adversary == "rogue_ca":
        return RogueCa(RS_BASE, f"{EMSP_ID}-root", rng.fork("rogue"))
    if scenario.adversary == "drop_all":
        return DropAll()
    return Adversary()


def run_scenario(scenario: Scenario) -> ScenarioResult:
    wall = time.perf_counter()
    rng = SeededRandomSource(f"pnc-sim/{scenario.seed}")
    if scenario.randomize:
        scenario = randomized(scenario, rng.fork("params"))
    start = parse_timestamp(scenario.start)
    clock = VirtualClock(start)
    trace = Trace(clock=lambda: clock.elapsed)
    scheduler = Scheduler(clock)
    adversary = _adversary_for(scenario, rng)
    network = Network(trace, rng.fork("network"), adversary)

    # EMSP back end
    emsp_hsm = SoftHSM(rng.fork("emsp-hsm"), EMSP_ID)
    root = CertificateAuthority.create_root(
        f"{EMSP_ID}-root", emsp_hsm, start - timedelta(days=365), start + timedelta(days=3650), scenario.key_alg
    )
    sub = root.create_subordinate(
        f"{EMSP_ID}-contract-ca", emsp_hsm, start - timedelta(days=30), start + timedelta(days=1825), scenario.key_alg
    )
    as_key = emsp_hsm.generate_keypair(scenario.key_alg)
    user = UserRecord.create(USER_ID, PASSWORD, "Driver", rng.fork("user"), iterations=1000)
    auth = AuthorizationServer(
        EMSP_ID,
        emsp_hsm,
        as_key,
        clients=[CLIENT_ID],
        verification_uri=f"{AS_BASE}/verify",
        users=[user],
        clock=clock,
        rng=rng.fork("as"),
        events=trace,
        enforce_single_use="as_no_single_use" not in scenario.mutations,
    )
    resource = ResourceServer(ResourceServerConfig(EMSP_ID, EMSP_ID, as_key.public_key), sub, clock=clock, events=trace)
    network.add_server(AS_BASE, EMSP_ID, auth.handle)
    network.add_server(RS_BASE, EMSP_ID, resource.handle)
    cp = ChargePoint(CP_ID, [root.certificate], clock=clock, rng=rng.fork("cp"), events=trace)
    network.add_server(CP_BASE, CP_ID, cp.handle)

    # vehicle and user agent
    ev_kwargs: dict[str, Any] = dict(
        hsm=SoftHSM(rng.fork("ev-hsm"), EV_ID),
        transport=network.transport_for(EV_ID),
        trust_roots={EMSP_ID: root.certificate},
        clock=clock,
        rng=rng.fork("ev"),
        events=trace,
        scheduler=scheduler,
        key_alg=scenario.key_alg,
        validate_chains="ev_no_chain_validation" not in scenario.mutations,
    )
    directory = [EmspDescriptor(EMSP_ID, "EMSP A", AS_BASE, RS_BASE)]
    if scenario.adversary == "details_tamper_ev":
        ev: ElectricVehicle = MaliciousVehicle(
            EV_ID, CLIENT_ID, directory, tamper_field=scenario.adversary_params.get("field", "max_period_expenses"), **ev_kwargs
        )
    else:
        ev = ElectricVehicle(EV_ID, CLIENT_ID, directory, **ev_kwargs)
    network.register_pairing_keys(EV_ID, lambda: ev.paired_session.key_material() if ev.paired_session else None)
    ua = UserAgent(
        UA_ID,
        transport=network.transport_for(UA_ID),
        link=network.ble_link(UA_ID, ev),
        user_id=USER_ID,
        password=PASSWORD,
        clock=clock,
        rng=rng.fork("ua"),
        events=trace,
    )
    details = (
        AuthorizationDetails.from_wire(scenario.details) if scenario.details is not None else default_details(start)
    )
    policy = ApprovalPolicy(details)
    attacker = None
    if scenario.adversary == "session_swap":
        attacker = SessionSwapAttacker(network.transport_for("attacker"), CLIENT_ID, AS_BASE, details)
    if scenario.adversary == "rogue_ca":
        network.reveal(EMSP_ID, "transport")

    state: dict[str, Any] = {
        "errors": [], "reviews": [], "cp": None, "costs": [], "receipts": [], "pairing_failures": 0, "ticket": None,
    }

    def pair() -> None:
        for _ in range(PAIRING_ATTEMPTS):
            offer = ev.offer_pairing(address=EV_ID)
            qr = network.oob(EV_ID, UA_ID, offer.to_qr().encode("utf-8")).decode("utf-8")
            try:
                ua.pair(PairingOffer.from_qr(qr, address=EV_ID))
            except PairingError as exc:
                state["pairing_failures"] += 1
                trace.note(UA_ID, "pairing_failed", reason=str(exc))
                continue
            scheduler.call_later(1, provision, "ua:provision")
            return
        state["errors"].append("pairing failed")

    def provision() -> None:
        try:
            ua.fetch_emsps()
            state["ticket"] = ua.configure_and_submit(EMSP_ID, details)
        except UaError as exc:
            state["errors"].append(f"provision: {exc.code}")
            return
        if attacker is not None:
            attacker.start()
        scheduler.call_later(scenario.review_delay, review, "ua:review")

    def review() -> None:
        ticket = state["ticket"]
        shown = ev.displayed_user_code
        codes = [ticket.user_code.display]
        if attacker is not None and attacker.user_code:
            # the driver first follows the attacker's phishing link, then the genuine code
            codes.insert(0, attacker.user_code)
        for code in codes:
            try:
                state["reviews"].append(ua.verify_and_decide(AS_BASE, code, shown, policy))
            except UaError as exc:
                state["errors"].append(f"review: {exc.code}")
        if attacker is not None:
            scheduler.call_later(5, lambda: attacker.poll(), "attacker:poll")

    def charge() -> None:
        if ev.state is not EvState.CREDENTIALED or ev.certificate is None:
            return
        cert = ev.certificate
        try:
            result = ev.pnc_authenticate(CP_BASE)
        except EvError as exc:
            state["errors"].append(f"charge: {exc.code}")
            return
        serial = int(result.get("serial", cert.serial))
        state["cp"] = PncVerdict(None if result.get("status") == "authorized" else result.get("reason", "rejected"), serial)
        if state["cp"].reason is not None:
            return
        session_id = f"{CP_ID}-s1"
        price = Money(0, cert.constraints.max_daily_expenses.currency if cert.constraints else "EUR")
        for reading in scenario.meter_readings:
            receipt = ev.sign_meter_receipt(session_id, reading, price, clock.now())
            reply = ev.send_meter_receipt(CP_BASE, receipt)
            state["receipts"].append(ReceiptVerdict(None if reply.get("status") == "ok" else reply.get("reason")))
        for amount in scenario.session_costs:
            currency = cert.constraints.max_daily_expenses.currency if cert.constraints else "EUR"
            state["costs"].append(cp.authorize_cost_for(cert.serial, Money.parse(amount, currency), clock.now()))

    scheduler.call_at(0.0, pair, "ua:pair")
    try:
        scheduler.run(until=scenario.max_time)
        if scenario.charge and ev.state is EvState.CREDENTIALED and ev.certificate is not None:
            begin = (ev.certificate.not_before - start).total_seconds()
            scheduler.call_at(max(clock.elapsed + 60, begin + 3600), charge, "ev:charge")
            scheduler.run()
    except ActorFailure as exc:
        raise ScenarioError(f"actor failed in {exc.label}: {exc.error!r}", trace) from exc

    if ev.last_error is not None:
        state["errors"].append(f"ev: {ev.last_error.code}")
    for event in trace.notes("authorization_abandoned", EV_ID):
        state["errors"].append(f"ev: authorization {event.get('reason')}")

    emsp_bytes = sum(
        c.plaintext for (kind, src, dst), c in network.counters.items()
        if kind == SERVER_AUTH and {src, dst} == {EV_ID, EMSP_ID}
    )
    total_bytes = emsp_bytes + sum(
        c.plaintext for (kind, src, dst), c in network.counters.items()
        if (kind == SERVER_AUTH and {src, dst} == {UA_ID, EMSP_ID}) or kind == PAIRED_SYMMETRIC
    )
    return ScenarioResult(
        scenario=scenario,
        trace=trace,
        ev_state=ev.state.value,
        certificate=ev.certificate,
        submitted_details=details,
        reviews=state["reviews"],
        cp_verdict=state["cp"],
        cost_decisions=state["costs"],
        receipt_results=state["receipts"],
        errors=state["errors"],
        bytes_ev_emsp=emsp_bytes,
        bytes_authorization_total=total_bytes,
        adversary_name=scenario.adversary,
        adversary_log=list(adversary.log),
        attacker_outcomes=list(attacker.outcomes) if attacker else [],
        token_commits=sum(1 for e in trace.of_kind("commit") if e.get("agreement") == "token"),
        pairing_failures=state["pairing_failures"],
        wall_seconds=time.perf_counter() - wall,
    )

