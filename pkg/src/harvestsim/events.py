"""Deterministic discrete-event core.

Events are ordered by (time, seq); seq is a global monotone counter, so
same-time events run in scheduling order and every processed event has a
strictly increasing logical timestamp. Ordering assertions elsewhere in
the package compare (time, seq) pairs, never bare floats.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field


@dataclass(frozen=True)
class LogRecord:
    """One entry in the simulation event log."""

    time: float
    seq: int
    kind: str
    data: dict = field(default_factory=dict, compare=False)

    @property
    def stamp(self) -> tuple[float, int]:
        return (self.time, self.seq)

    def __repr__(self) -> str:
        fields = " ".join(f"{k}={v}" for k, v in sorted(self.data.items()))
        return f"[t={self.time:.9f} #{self.seq}] {self.kind} {fields}"


class EventLog:
    """Append-only record of everything the simulation did."""

    def __init__(self):
        self.records: list[LogRecord] = []

    def append(self, time: float, seq: int, kind: str, **data) -> LogRecord:
        rec = LogRecord(time, seq, kind, data)
        self.records.append(rec)
        return rec

    def of_kind(self, *kinds: str) -> list[LogRecord]:
        want = set(kinds)
        return [r for r in self.records if r.kind in want]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def excerpt(self, center_seq: int, radius: int = 6) -> str:
        lines = [repr(r) for r in self.records
                 if abs(r.seq - center_seq) <= radius]
        return "\n".join(lines)


class Simulator:
    """Single-writer event loop with a deterministic queue."""

    def __init__(self, start_time: float = 0.0):
        self.now = start_time
        self._queue: list[tuple[float, int, object]] = []
        self._counter = itertools.count()
        self.log = EventLog()

    def next_seq(self) -> int:
        return next(self._counter)

    def schedule(self, delay: float, fn, *args) -> int:
        """Run fn(*args) after `delay` sim-seconds. Returns the event seq."""
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        return self.schedule_at(self.now + delay, fn, *args)

    def schedule_at(self, time: float, fn, *args) -> int:
        if time < self.now:
            raise ValueError(f"cannot schedule at {time} before now {self.now}")
        seq = self.next_seq()
        heapq.heappush(self._queue, (time, seq, (fn, args)))
        return seq

    def record(self, kind: str, **data) -> LogRecord:
        """Log an occurrence at the current time with a fresh seq."""
        return self.log.append(self.now, self.next_seq(), kind, **data)

    def run(self, until: float | None = None) -> None:
        """Process events in (time, seq) order, optionally up to `until`."""
        while self._queue:
            time, seq, (fn, args) = self._queue[0]
            if until is not None and time > until:
                break
            heapq.heappop(self._queue)
            self.now = time
            fn(*args)
        if until is not None and until > self.now:
            self.now = until

    def pending(self) -> int:
        return len(self._queue)
