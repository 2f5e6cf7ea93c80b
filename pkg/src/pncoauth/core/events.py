"""Instrumentation hooks the actors call at protocol milestones.

``running`` marks that an actor has begun a run with a peer over some data;
``commit`` marks that an actor has completed one and accepts the data. The
simulator records them and checks authentication properties over the log.
"""

from __future__ import annotations

import hashlib
from typing import Any, Protocol


def payload_digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class EventSink(Protocol):
    def running(self, kind: str, actor: str, peer: str, payload: bytes) -> None: ...

    def commit(self, kind: str, actor: str, peer: str, payload: bytes) -> None: ...

    def mismatch(self, actor: str, reason: str) -> None: ...

    def note(self, actor: str, what: str, **detail: Any) -> None: ...


class NullSink:
    def running(self, kind: str, actor: str, peer: str, payload: bytes) -> None:
        pass

    def commit(self, kind: str, actor: str, peer: str, payload: bytes) -> None:
        pass

    def mismatch(self, actor: str, reason: str) -> None:
        pass

    def note(self, actor: str, what: str, **detail: Any) -> None:
        pass
