"""In-process message transport: bounded, order-preserving byte channels.

Stands in for the network message layer between pipeline stages.  Each
channel is a FIFO of encoded frames with blocking backpressure; close()
wakes the (single) consumer with an end-of-stream marker.
"""

from __future__ import annotations

import queue

_CLOSE = object()


class Channel:
    """Point-to-point FIFO of frames with bounded capacity."""

    def __init__(self, capacity: int = 0):
        self._q: queue.Queue = queue.Queue(maxsize=capacity)

    def send(self, frame: bytes, timeout: float | None = None) -> None:
        """Blocks while the channel is full."""
        self._q.put(frame, timeout=timeout)

    def recv(self, timeout: float | None = None):
        """Next frame, or None once the channel is closed and drained.

        Raises queue.Empty on timeout.
        """
        item = self._q.get(timeout=timeout)
        if item is _CLOSE:
            return None
        return item

    def close(self) -> None:
        self._q.put(_CLOSE)

    def qsize(self) -> int:
        return self._q.qsize()
