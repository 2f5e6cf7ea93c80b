"""Discrete-event scheduler on a virtual clock."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable

from ..core.runtime import VirtualClock


class ActorFailure(RuntimeError):
    """An actor raised while the scheduler was running it."""

    def __init__(self, label: str, error: BaseException) -> None:
        super().__init__(f"{label}: {error!r}")
        self.label = label
        self.error = error


@dataclass(order=True)
class _Job:
    at: float
    order: int
    label: str = field(compare=False)
    fn: Callable[[], None] = field(compare=False)


class Scheduler:
    """Runs callbacks in virtual-time order; ties run in insertion order."""

    def __init__(self, clock: VirtualClock) -> None:
        self.clock = clock
        self._queue: list[_Job] = []
        self._order = 0
        self.executed: list[tuple[float, str]] = []

    def call_later(self, delay: float, fn: Callable[[], None], label: str = "") -> None:
        self.call_at(self.clock.elapsed + max(delay, 0.0), fn, label)

    def call_at(self, at: float, fn: Callable[[], None], label: str = "") -> None:
        self._order += 1
        heapq.heappush(self._queue, _Job(at, self._order, label, fn))

    def __len__(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        if not self._queue:
            return False
        job = heapq.heappop(self._queue)
        if job.at > self.clock.elapsed:
            self.clock.advance_to(job.at)
        self.executed.append((job.at, job.label))
        try:
            job.fn()
        except Exception as exc:
            raise ActorFailure(job.label, exc) from exc
        return True

    def run(self, until: float | None = None, max_steps: int = 100_000) -> int:
        steps = 0
        while self._queue and steps < max_steps:
            if until is not None and self._queue[0].at > until:
                break
            self.step()
            steps += 1
        if until is not None and self.clock.elapsed < until and not self._queue:
            self.clock.advance_to(until)
        return steps
