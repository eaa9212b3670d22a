"""Ordered, bounded, resumable event buffers for the server-push streams.

Single producer per channel, many consumers. Every event gets a strictly
increasing sequence number; consumers poll from their last-seen sequence.
A consumer that falls behind the bounded window is told so (and the app
layer disconnects it).
"""

from __future__ import annotations

import threading
from collections import deque
from typing import Optional


class EventBuffer:
    def __init__(self, capacity: int = 4096) -> None:
        self.capacity = capacity
        self._events: deque[tuple[int, dict]] = deque(maxlen=capacity)
        self._seq = 0
        self._cond = threading.Condition()
        self._closed = False

    def publish(self, payload: dict) -> int:
        with self._cond:
            self._seq += 1
            self._events.append((self._seq, payload))
            self._cond.notify_all()
            return self._seq

    @property
    def last_seq(self) -> int:
        with self._cond:
            return self._seq

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        with self._cond:
            return self._closed

    def read_since(self, cursor: int, timeout: Optional[float] = 1.0):
        """Events with seq > cursor.

        Returns (events, overflowed, closed): ``overflowed`` is True when the
        cursor has been evicted from the window, i.e. the consumer lost
        events and cannot resume seamlessly.
        """
        with self._cond:
            if not self._events or self._events[-1][0] <= cursor:
                if self._closed:
                    return [], False, True
                self._cond.wait(timeout)
            if self._closed and (not self._events or self._events[-1][0] <= cursor):
                return [], False, True
            oldest = self._events[0][0] if self._events else self._seq + 1
            overflowed = cursor + 1 < oldest and cursor < self._seq
            events = [(seq, payload) for seq, payload in self._events if seq > cursor]
            return events, overflowed, False
