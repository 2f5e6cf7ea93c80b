from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest

from pncoauth.authserver import AuthorizationServer, UserRecord
from pncoauth.core.model import AuthorizationDetails, Money, Scope, PROVISIONING_SCOPE
from pncoauth.core.runtime import SeededRandomSource, VirtualClock
from pncoauth.pki import CertificateAuthority, SoftHSM
from pncoauth.sim.trace import Trace

T0 = datetime(2025, 1, 1, 8, 0, 0, tzinfo=timezone.utc)
CLIENT = "oem-pnc-app"
SCOPE = Scope.of(PROVISIONING_SCOPE)


def make_details(
    start: datetime = datetime(2025, 1, 1, tzinfo=timezone.utc),
    days: int = 30,
    period: str = "100.00",
    daily: str = "25.00",
    currency: str = "EUR",
) -> AuthorizationDetails:
    return AuthorizationDetails(
        period_start=start,
        period_end=start + timedelta(days=days),
        max_period_expenses=Money.parse(period, currency),
        max_daily_expenses=Money.parse(daily, currency),
    )


class Pki:
    def __init__(self, seed: str = "pki", alg: str = "ed25519") -> None:
        self.hsm = SoftHSM(SeededRandomSource(seed), "emsp")
        nb, na = datetime(2024, 1, 1, tzinfo=timezone.utc), datetime(2034, 1, 1, tzinfo=timezone.utc)
        self.root = CertificateAuthority.create_root("emsp-a-root", self.hsm, nb, na, alg)
        self.sub = self.root.create_subordinate("emsp-a-contract-ca", self.hsm, nb, na, alg)


@pytest.fixture
def clock() -> VirtualClock:
    return VirtualClock(T0)


@pytest.fixture
def rng() -> SeededRandomSource:
    return SeededRandomSource("tests")


@pytest.fixture
def details() -> AuthorizationDetails:
    return make_details()


@pytest.fixture
def pki() -> Pki:
    return Pki()


@pytest.fixture
def trace(clock: VirtualClock) -> Trace:
    return Trace(clock.monotonic)


@pytest.fixture
def auth_server(clock, rng, trace):
    hsm = SoftHSM(rng.fork("as-hsm"), "as")
    key = hsm.generate_keypair()
    user = UserRecord.create("driver", "pw", rng=rng.fork("user"), iterations=1000)
    return AuthorizationServer(
        "emsp-a",
        hsm,
        key,
        clients=[CLIENT],
        verification_uri="https://as.emsp-a.example/verify",
        users=[user],
        clock=clock,
        rng=rng.fork("as"),
        events=trace,
    )


AS_BASE = "https://as.emsp-a.example"
RS_BASE = "https://rs.emsp-a.example"


class World:
    """One EMSP, one vehicle and a user agent wired through direct in-process calls."""

    def __init__(self, clock: VirtualClock, trace: Trace | None = None, *, ev_cls=None, **ev_kwargs) -> None:
        from pncoauth.resourceserver import ResourceServer, ResourceServerConfig
        from pncoauth.useragent import UserAgent
        from pncoauth.vehicle import ElectricVehicle, EmspDescriptor

        rng = SeededRandomSource("world")
        self.clock = clock
        self.pki = Pki("world")
        as_hsm = SoftHSM(rng.fork("as-hsm"), "as")
        as_key = as_hsm.generate_keypair()
        self.auth = AuthorizationServer(
            "emsp-a", as_hsm, as_key, clients=[CLIENT], verification_uri=AS_BASE + "/verify",
            users=[UserRecord.create("driver", "pw", rng=rng.fork("user"), iterations=1000)],
            clock=clock, rng=rng.fork("as"), events=trace,
        )
        self.rs = ResourceServer(ResourceServerConfig("emsp-a", "emsp-a", as_key.public_key), self.pki.sub, clock=clock, events=trace)
        self.handlers = {AS_BASE: self.auth.handle, RS_BASE: self.rs.handle}
        self.sent: list[tuple[str, bytes]] = []
        self.emsp = EmspDescriptor("emsp-a", "EMSP A", AS_BASE, RS_BASE)
        self.ev_hsm = SoftHSM(rng.fork("ev-hsm"), "ev")
        self.ev = (ev_cls or ElectricVehicle)(
            "ev-1", CLIENT, [self.emsp], hsm=self.ev_hsm, transport=self.transport,
            trust_roots={"emsp-a": self.pki.root.certificate}, clock=clock, rng=rng.fork("ev"), events=trace, **ev_kwargs,
        )
        self.ua = UserAgent(
            "ua-1", transport=self.transport, link=self.ev.handle_ble, user_id="driver", password="pw",
            clock=clock, rng=rng.fork("ua"), events=trace,
        )

    def transport(self, base, request):
        self.sent.append((base, request.to_bytes()))
        return self.handlers[base](request)

    def pair(self) -> None:
        self.ua.pair(self.ev.offer_pairing())

    def submit(self, details=None):
        self.pair()
        self.ua.fetch_emsps()
        return self.ua.configure_and_submit("emsp-a", details or make_details())

    def approve(self, decision: str = "grant") -> None:
        self.auth.record_decision(self.ua.ticket.user_code, "driver", decision, self.clock.now())


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, text: str) -> None:
    """Record one PASS/FAIL line for the acceptance summary."""
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
