"""Append-only execution trace, doubling as the actors' event sink."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

from ..core.events import payload_digest

RUNNING = "running"
COMMIT = "commit"
KEY_REVEAL = "key_reveal"
MISMATCH = "mismatch"
NOTE = "note"
MESSAGE = "message"

KINDS = (RUNNING, COMMIT, KEY_REVEAL, MISMATCH, NOTE, MESSAGE)


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    time: float
    kind: str
    data: dict[str, Any]

    def get(self, key: str, default: Any = None) -> Any:
        return self.data.get(key, default)

    def to_dict(self) -> dict[str, Any]:
        return {"seq": self.seq, "t": self.time, "kind": self.kind, **self.data}

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "TraceEvent":
        obj = dict(obj)
        seq, time, kind = obj.pop("seq"), obj.pop("t"), obj.pop("kind")
        if kind not in KINDS:
            raise ValueError(f"unknown trace event kind {kind!r}")
        return cls(int(seq), float(time), kind, obj)


@dataclass
class Trace:
    """Trace of one scenario run.

    Implements the actors' ``EventSink`` protocol, so actors write their
    Running/Commit/Mismatch events straight into it.
    """

    clock: Callable[[], float] = field(default=lambda: 0.0, repr=False)
    events: list[TraceEvent] = field(default_factory=list)

    def _append(self, kind: str, **data: Any) -> TraceEvent:
        seq = self.events[-1].seq + 1 if self.events else 0
        event = TraceEvent(seq, round(float(self.clock()), 6), kind, data)
        self.events.append(event)
        return event

    # EventSink
    def running(self, kind: str, actor: str, peer: str, payload: bytes) -> None:
        self._append(RUNNING, agreement=kind, actor=actor, peer=peer, digest=payload_digest(payload))

    def commit(self, kind: str, actor: str, peer: str, payload: bytes) -> None:
        self._append(COMMIT, agreement=kind, actor=actor, peer=peer, digest=payload_digest(payload))

    def mismatch(self, actor: str, reason: str) -> None:
        self._append(MISMATCH, actor=actor, reason=reason)

    def note(self, actor: str, what: str, **detail: Any) -> None:
        self._append(NOTE, actor=actor, what=what, **{k: _plain(v) for k, v in detail.items()})

    # harness records
    def key_reveal(self, entity: str, key_kind: str) -> None:
        self._append(KEY_REVEAL, entity=entity, key_kind=key_kind)

    def message(self, **record: Any) -> None:
        self._append(MESSAGE, **record)

    # queries
    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of_kind(self, *kinds: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]

    def notes(self, what: str, actor: str | None = None) -> list[TraceEvent]:
        return [
            e for e in self.events
            if e.kind == NOTE and e.get("what") == what and (actor is None or e.get("actor") == actor)
        ]

    def without(self, predicate: Callable[[TraceEvent], bool]) -> "Trace":
        """Copy with matching events removed; used for trace surgery in tests."""
        return Trace(self.clock, [e for e in self.events if not predicate(e)])

    def replaced(self, seq: int, **changes: Any) -> "Trace":
        events = [
            TraceEvent(e.seq, e.time, e.kind, {**e.data, **changes}) if e.seq == seq else e for e in self.events
        ]
        return Trace(self.clock, events)

    # serialization
    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"
            for e in self.events
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        events = [TraceEvent.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
        for a, b in zip(events, events[1:]):
            if b.seq <= a.seq:
                raise ValueError("trace sequence numbers must increase")
        return cls(events=events)

    @classmethod
    def load(cls, path: str | Path) -> "Trace":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def of(cls, events: Iterable[TraceEvent]) -> "Trace":
        return cls(events=list(events))


def _plain(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    return str(value)
