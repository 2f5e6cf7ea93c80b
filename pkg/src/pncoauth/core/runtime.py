"""Clocks and randomness sources shared by all actors.

Every actor receives its clock and random source at construction time, so
the same code runs against wall-clock time and OS entropy in a deployment
and against a virtual clock and a seeded stream inside the simulator.
"""

from __future__ import annotations

import hashlib
import random
import secrets
import time
from datetime import datetime, timedelta, timezone
from typing import Protocol


def utc_now() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


class Clock(Protocol):
    def now(self) -> datetime: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> datetime:
        return utc_now()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class VirtualClock:
    """Clock whose time only moves when told to.

    ``sleep`` advances the clock instead of blocking, which lets a poll loop
    with a five second interval run in microseconds.
    """

    def __init__(self, start: datetime | None = None) -> None:
        if start is None:
            start = datetime(2025, 1, 1, tzinfo=timezone.utc)
        if start.tzinfo is None:
            raise ValueError("virtual clock start must be timezone-aware")
        self._start = start.astimezone(timezone.utc)
        self._elapsed = 0.0

    @property
    def elapsed(self) -> float:
        return self._elapsed

    def now(self) -> datetime:
        # Whole seconds only; sub-second progress is kept in _elapsed.
        return self._start + timedelta(seconds=int(self._elapsed))

    def monotonic(self) -> float:
        return self._elapsed

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot move a clock backwards")
        self._elapsed += seconds

    def advance_to(self, elapsed: float) -> None:
        if elapsed < self._elapsed:
            raise ValueError("cannot move a clock backwards")
        self._elapsed = elapsed

    def sleep(self, seconds: float) -> None:
        self.advance(max(0.0, seconds))


class RandomSource(Protocol):
    def token_bytes(self, n: int) -> bytes: ...

    def randbelow(self, n: int) -> int: ...


class SystemRandomSource:
    """OS entropy via :mod:`secrets`. The default for every actor."""

    def token_bytes(self, n: int) -> bytes:
        return secrets.token_bytes(n)

    def randbelow(self, n: int) -> int:
        return secrets.randbelow(n)


class SeededRandomSource:
    """Reproducible stream for simulation and tests. Not for production keys."""

    def __init__(self, seed: int | str | bytes) -> None:
        if isinstance(seed, int):
            seed = str(seed)
        if isinstance(seed, str):
            seed = seed.encode("utf-8")
        self._seed = bytes(seed)
        self._rng = random.Random(hashlib.sha256(self._seed).digest())

    def token_bytes(self, n: int) -> bytes:
        return self._rng.randbytes(n)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("upper bound must be positive")
        return self._rng.randrange(n)

    def random(self) -> float:
        return self._rng.random()

    def choice(self, seq):
        return seq[self.randbelow(len(seq))]

    def fork(self, label: str) -> "SeededRandomSource":
        """Independent child stream; depends only on the seed and label."""
        return SeededRandomSource(self._seed + b"/" + label.encode("utf-8"))
