"""Deterministic discrete-event simulation kernel."""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field
from logging import Logger, getLogger
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional

import numpy as np

from hpc_rtms.types import EventKind

Handler = Callable[["Event"], None]


class CausalityError(ValueError):
    """Raised when an event is scheduled before the current simulated time."""


@dataclass(frozen=True, order=True)
class Event:
    """One scheduled occurrence. Events order by (time, seq)."""

    time: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: Mapping[str, Any] = field(compare=False, default_factory=dict)

    def to_line(self) -> str:
        """Render the event in the tab-separated trace format."""
        payload = json.dumps(dict(self.payload), sort_keys=True, separators=(",", ":"))
        return f"{self.time!r}\t{self.seq}\t{self.kind.value}\t{payload}"


@dataclass
class SimTrace:
    """Processed events in dequeue order."""

    events: List[Event] = field(default_factory=list)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of_kind(self, kind: EventKind) -> List[Event]:
        """Return the processed events with the given kind."""
        return [event for event in self.events if event.kind is kind]

    def is_ordered(self) -> bool:
        """True when every consecutive pair respects (time, seq) order."""
        return all(a < b for a, b in zip(self.events, self.events[1:]))

    def to_lines(self) -> List[str]:
        """Render the trace, one event per line."""
        return [event.to_line() for event in self.events]

    def write(self, path: Path) -> None:
        """Write the trace to a text file."""
        path.write_text("".join(f"{line}\n" for line in self.to_lines()), encoding="utf-8")


class EventQueue:
    """Priority queue of events with lazy cancellation."""

    def __init__(self) -> None:
        self._heap: List[Event] = []
        self._cancelled: set[int] = set()
        self._seq: int = 0

    def __len__(self) -> int:
        return len(self._heap) - len(self._cancelled)

    def push(self, time: float, kind: EventKind, payload: Optional[Mapping[str, Any]] = None) -> Event:
        """Create and enqueue an event; the insertion counter breaks time ties."""
        event = Event(time=time, seq=self._seq, kind=kind, payload=dict(payload or {}))
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def cancel(self, event: Event) -> None:
        """Mark a pending event so it is dropped when it reaches the head."""
        self._cancelled.add(event.seq)

    def peek(self) -> Optional[Event]:
        """Return the next live event without removing it."""
        self._drop_cancelled()
        return self._heap[0] if self._heap else None

    def pop(self) -> Event:
        """Remove and return the next live event."""
        self._drop_cancelled()
        return heapq.heappop(self._heap)

    def _drop_cancelled(self) -> None:
        while self._heap and self._heap[0].seq in self._cancelled:
            self._cancelled.discard(heapq.heappop(self._heap).seq)


class Simulation:
    """Single-threaded event loop: clock, queue, handlers and trace recording."""

    def __init__(self, *, record_trace: bool = True) -> None:
        self._queue = EventQueue()
        self._handlers: Dict[EventKind, List[Handler]] = {}
        self._now: float = 0.0
        self._stopped: bool = False
        self._record_trace = record_trace
        self.trace = SimTrace()
        self._logger: Logger = getLogger(__name__)

    @property
    def now(self) -> float:
        """Current simulated time in seconds."""
        return self._now

    @property
    def pending(self) -> int:
        """Number of live events still queued."""
        return len(self._queue)

    def on(self, kind: EventKind, handler: Handler) -> None:
        """Register a handler for an event kind. Handlers run in registration order."""
        self._handlers.setdefault(kind, []).append(handler)

    def schedule(self, time: float, kind: EventKind, payload: Optional[Mapping[str, Any]] = None) -> Event:
        """Enqueue an event at an absolute time."""
        if not math.isfinite(time):
            raise CausalityError(f"Event {kind.value} scheduled at non-finite time {time}")
        if time < self._now:
            raise CausalityError(f"Event {kind.value} at t={time} is earlier than now={self._now}")
        return self._queue.push(time, kind, payload)

    def schedule_in(self, delay: float, kind: EventKind, payload: Optional[Mapping[str, Any]] = None) -> Event:
        """Enqueue an event `delay` seconds from now."""
        return self.schedule(self._now + delay, kind, payload)

    def cancel(self, event: Optional[Event]) -> None:
        """Cancel a pending event; None is accepted for convenience."""
        if event is not None:
            self._queue.cancel(event)

    def stop(self) -> None:
        """Stop the loop after the event currently being processed."""
        self._stopped = True

    def run_until(self, horizon: float) -> SimTrace:
        """Process every event with time <= horizon, in (time, seq) order.

        The clock ends at `horizon` unless `stop()` was called, in which case it stays at the stopping event.
        """
        if horizon < self._now:
            raise CausalityError(f"Horizon {horizon} is earlier than now={self._now}")
        self._stopped = False
        while not self._stopped:
            head = self._queue.peek()
            if head is None or head.time > horizon:
                break
            event = self._queue.pop()
            self._now = event.time
            if self._record_trace:
                self.trace.events.append(event)
            for handler in self._handlers.get(event.kind, ()):
                handler(event)
        if not self._stopped:
            self._now = horizon
        return self.trace


class RandomStreams:
    """Named, independent random streams derived from one base seed.

    The same (seed, label, indices) always yields the same numpy Generator state.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    @staticmethod
    def _label_key(label: str) -> int:
        return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=4).digest(), "little")

    def stream(self, label: str, *indices: int) -> np.random.Generator:
        """Return a fresh generator for the given label and optional indices (replica, job, ...)."""
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(self._label_key(label), *indices))
        return np.random.default_rng(sequence)
