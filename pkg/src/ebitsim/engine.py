"""Deterministic discrete-event core.

One binary heap, keys (fire_time, insertion_seq): ties dispatch in schedule
order, so a replication is a pure function of its seed. Cancellation is lazy
(handles are flagged and skipped on pop).
"""

from __future__ import annotations

import heapq
from typing import Callable

# event kinds used across the simulator (free-form strings are allowed too)
PAIR_ARRIVAL = "pair-arrival"
MESSAGE_DELIVERY = "message-delivery"
BSM_COMPLETE = "bsm-complete"
XZ_COMPLETE = "xz-complete"
SLOT_BOUNDARY = "slot-boundary"
SIM_END = "sim-end"


class Event:
    """Handle for one scheduled callback."""

    __slots__ = ("fire_time", "seq", "kind", "callback", "detail", "cancelled")

    def __init__(self, fire_time: float, seq: int, kind: str,
                 callback: Callable[[], None], detail: str) -> None:
        self.fire_time = fire_time
        self.seq = seq
        self.kind = kind
        self.callback = callback
        self.detail = detail
        self.cancelled = False

    def __repr__(self) -> str:
        state = " cancelled" if self.cancelled else ""
        return f"<Event {self.kind} @ {self.fire_time!r} seq={self.seq}{state}>"


class Engine:
    """Event queue plus the simulation clock."""

    def __init__(self, trace: Callable[[str], None] | None = None) -> None:
        self.now = 0.0
        self.dispatched = 0
        self._heap: list[tuple[float, int, Event]] = []
        self._next_seq = 0
        self.trace = trace

    def schedule(self, delay: float, kind: str, callback: Callable[[], None],
                 detail: str = "") -> Event:
        """Schedule callback at now + delay; returns a cancellable handle."""
        if delay < 0:
            raise ValueError(f"cannot schedule into the past (delay {delay})")
        ev = Event(self.now + delay, self._next_seq, kind, callback, detail)
        self._next_seq += 1
        heapq.heappush(self._heap, (ev.fire_time, ev.seq, ev))
        return ev

    def cancel(self, event: Event) -> None:
        event.cancelled = True

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)

    def _dispatch(self, ev: Event) -> None:
        self.now = ev.fire_time
        self.dispatched += 1
        if self.trace is not None:
            self.trace(f"{ev.fire_time!r}\t{ev.seq}\t{ev.kind}\t{ev.detail}")
        ev.callback()

    def run_until(self, t_end: float) -> int:
        """Dispatch every event with fire_time <= t_end; clock lands on t_end."""
        if t_end < self.now:
            raise ValueError(f"t_end {t_end} is before now {self.now}")
        count = 0
        while self._heap and self._heap[0][0] <= t_end:
            _, _, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self._dispatch(ev)
            count += 1
        self.now = t_end
        return count

    def run_to_exhaustion(self, hard_limit: float) -> int:
        """Dispatch until the queue empties; aborts past hard_limit (stuck run)."""
        count = 0
        while self._heap:
            _, _, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            if ev.fire_time > hard_limit:
                raise RuntimeError(
                    f"event queue still live at {ev.fire_time} s "
                    f"(limit {hard_limit} s); drain did not converge"
                )
            self._dispatch(ev)
            count += 1
        return count
