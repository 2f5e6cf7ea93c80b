"""Authentication properties over recorded traces.

For each agreement kind, a Commit(a, b, d) by one party must be preceded by
a Running(b, a, d) of its peer, and distinct commits need distinct runs
(injective agreement). A commit is excused when a key relevant to that
agreement was revealed for the committing party or its peer.

Injective agreement is checked twice: a linear streaming matcher and a
brute-force maximum bipartite matching. Tests require both to agree.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable

from .trace import COMMIT, KEY_REVEAL, RUNNING, Trace, TraceEvent

# agreement kind -> key kinds whose reveal voids the guarantee
AGREEMENTS: dict[str, frozenset[str]] = {
    "token": frozenset({"signing", "transport"}),
    "install_request": frozenset({"signing", "transport"}),
    # The EV checks the certificate chain itself, so only a CA signing key
    # leak lets an attacker get a forged certificate accepted.
    "install_response": frozenset({"signing"}),
}

PROPERTIES = ("aliveness", "weak_agreement", "non_injective_agreement", "injective_agreement")


@dataclass(frozen=True)
class Counterexample:
    agreement: str
    commit_seq: int
    reason: str
    related: tuple[int, ...] = ()


@dataclass(frozen=True)
class AgreementResult:
    agreement: str
    counterexamples: tuple[Counterexample, ...] = ()
    commits: int = 0
    excused: int = 0

    @property
    def holds(self) -> bool:
        return not self.counterexamples

    def __bool__(self) -> bool:
        return self.holds


def _excused(commit: TraceEvent, reveals: Iterable[TraceEvent]) -> bool:
    relevant = AGREEMENTS.get(commit.get("agreement"), frozenset())
    parties = (commit.get("actor"), commit.get("peer"))
    return any(r.get("entity") in parties and r.get("key_kind") in relevant for r in reveals)


def _key(event: TraceEvent, *, swap: bool) -> tuple[str, str, str]:
    # a Running(b, a, d) matches Commit(a, b, d)
    if swap:
        return (event.get("peer"), event.get("actor"), event.get("digest"))
    return (event.get("actor"), event.get("peer"), event.get("digest"))


def check_injective_agreement(trace: Trace, commit_kind: str, running_kind: str | None = None) -> AgreementResult:
    """Streaming matcher: one pass, FIFO queue of unmatched runs per (a, b, d)."""
    running_kind = running_kind or commit_kind
    reveals = trace.of_kind(KEY_REVEAL)
    available: dict[tuple[str, str, str], deque[int]] = defaultdict(deque)
    used: dict[tuple[str, str, str], list[int]] = defaultdict(list)
    seen: set[tuple[str, str, str]] = set()
    problems: list[Counterexample] = []
    commits = excused = 0
    for event in trace:
        if event.kind == RUNNING and event.get("agreement") == running_kind:
            key = _key(event, swap=True)
            available[key].append(event.seq)
            seen.add(key)
        elif event.kind == COMMIT and event.get("agreement") == commit_kind:
            commits += 1
            if _excused(event, reveals):
                excused += 1
                continue
            key = _key(event, swap=False)
            if available[key]:
                used[key].append(available[key].popleft())
            elif key in seen:
                problems.append(Counterexample(commit_kind, event.seq, "injectivity", tuple(used[key])))
            else:
                problems.append(Counterexample(commit_kind, event.seq, "no matching running"))
    return AgreementResult(commit_kind, tuple(problems), commits, excused)


def check_injective_agreement_bruteforce(
    trace: Trace, commit_kind: str, running_kind: str | None = None
) -> AgreementResult:
    """Quadratic reference: maximum matching by augmenting paths over all pairs."""
    running_kind = running_kind or commit_kind
    events = list(trace)
    reveals = [e for e in events if e.kind == KEY_REVEAL]
    commits = [e for e in events if e.kind == COMMIT and e.get("agreement") == commit_kind]
    runs = [e for e in events if e.kind == RUNNING and e.get("agreement") == running_kind]
    required = [c for c in commits if not _excused(c, reveals)]

    def compatible(c: TraceEvent, r: TraceEvent) -> bool:
        return (
            r.seq < c.seq
            and r.get("actor") == c.get("peer")
            and r.get("peer") == c.get("actor")
            and r.get("digest") == c.get("digest")
        )

    owner: dict[int, int] = {}  # run index -> commit index

    def augment(ci: int, visited: set[int]) -> bool:
        for ri, run in enumerate(runs):
            if ri in visited or not compatible(required[ci], run):
                continue
            visited.add(ri)
            if ri not in owner or augment(owner[ri], visited):
                owner[ri] = ci
                return True
        return False

    for ci in range(len(required)):
        augment(ci, set())
    matched = set(owner.values())
    problems = []
    for ci, commit in enumerate(required):
        if ci in matched:
            continue
        any_run = any(compatible(commit, r) for r in runs)
        problems.append(Counterexample(commit_kind, commit.seq, "injectivity" if any_run else "no matching running"))
    return AgreementResult(commit_kind, tuple(problems), len(commits), len(commits) - len(required))


def _weak_check(trace: Trace, commit_kind: str, level: str) -> bool:
    reveals = trace.of_kind(KEY_REVEAL)
    runs: list[TraceEvent] = []
    for event in trace:
        if event.kind == RUNNING and event.get("agreement") == commit_kind:
            runs.append(event)
        elif event.kind == COMMIT and event.get("agreement") == commit_kind:
            if _excused(event, reveals):
                continue
            a, b, d = event.get("actor"), event.get("peer"), event.get("digest")
            if level == "aliveness":
                ok = any(r.get("actor") == b for r in runs)
            elif level == "weak_agreement":
                ok = any(r.get("actor") == b and r.get("peer") == a for r in runs)
            else:
                ok = any(r.get("actor") == b and r.get("peer") == a and r.get("digest") == d for r in runs)
            if not ok:
                return False
    return True


@dataclass
class PropertyReport:
    """Per agreement kind, whether each property in Lowe's hierarchy holds."""

    results: dict[str, dict[str, bool]] = field(default_factory=dict)

    def holds(self, prop: str) -> bool:
        return all(r[prop] for r in self.results.values())

    @property
    def all_hold(self) -> bool:
        return all(self.holds(p) for p in PROPERTIES)

    def to_dict(self) -> dict[str, dict[str, bool]]:
        return {k: dict(v) for k, v in self.results.items()}


def check_weaker_properties(trace: Trace, kinds: Iterable[str] = tuple(AGREEMENTS)) -> PropertyReport:
    report = PropertyReport()
    for kind in kinds:
        report.results[kind] = {
            "aliveness": _weak_check(trace, kind, "aliveness"),
            "weak_agreement": _weak_check(trace, kind, "weak_agreement"),
            "non_injective_agreement": _weak_check(trace, kind, "non_injective_agreement"),
            "injective_agreement": check_injective_agreement(trace, kind).holds,
        }
    return report


@dataclass(frozen=True)
class OracleVerdict:
    streaming: dict[str, AgreementResult]
    bruteforce: dict[str, AgreementResult]
    properties: PropertyReport

    @property
    def consistent(self) -> bool:
        return all(
            self.streaming[k].holds == self.bruteforce[k].holds
            and len(self.streaming[k].counterexamples) == len(self.bruteforce[k].counterexamples)
            for k in self.streaming
        )

    @property
    def counterexamples(self) -> list[Counterexample]:
        return [c for r in self.streaming.values() for c in r.counterexamples]

    @property
    def holds(self) -> bool:
        return self.consistent and not self.counterexamples


def check_all(trace: Trace) -> OracleVerdict:
    return OracleVerdict(
        {k: check_injective_agreement(trace, k) for k in AGREEMENTS},
        {k: check_injective_agreement_bruteforce(trace, k) for k in AGREEMENTS},
        check_weaker_properties(trace),
    )
