"""Round-robin dispatch of inference orders to the predict workers.

The balancer never alters an order beyond appending its own processing
time to the frame's timing metadata; payload bytes pass through
untouched (see wire.splice_timing).
"""

from __future__ import annotations

import logging
import threading
import time

from .errors import DuplicateEndpoint, NoWorkers, UnknownEndpoint
from .model import InferenceOrder
from .transport import Channel
from .wire import encode_order, splice_timing

log = logging.getLogger(__name__)

DEFAULT_INBOUND_CAPACITY = 1024

STAGE_NAME = "balancer"


class WorkerRegistry:
    """Ordered worker endpoints plus the rotation cursor."""

    def __init__(self):
        self._entries: list[tuple[str, Channel]] = []
        self.cursor = 0

    def __len__(self) -> int:
        return len(self._entries)

    def endpoints(self) -> list[str]:
        return [name for name, _ in self._entries]

    def register(self, endpoint: str, channel: Channel) -> int:
        if any(name == endpoint for name, _ in self._entries):
            raise DuplicateEndpoint(f"worker {endpoint!r} already registered")
        self._entries.append((endpoint, channel))
        return len(self._entries)

    def deregister(self, endpoint: str) -> int:
        for i, (name, _) in enumerate(self._entries):
            if name == endpoint:
                del self._entries[i]
                if i < self.cursor:
                    self.cursor -= 1
                if self._entries:
                    self.cursor %= len(self._entries)
                else:
                    self.cursor = 0
                return len(self._entries)
        raise UnknownEndpoint(f"worker {endpoint!r} not registered")

    def take_next(self) -> tuple[int, str, Channel]:
        if not self._entries:
            raise NoWorkers("no registered workers")
        index = self.cursor
        endpoint, channel = self._entries[index]
        self.cursor = (index + 1) % len(self._entries)
        return index, endpoint, channel


class LoadBalancer:
    """Single dispatching agent over an inbound order channel."""

    def __init__(self, inbound: Channel | None = None):
        self.inbound = inbound if inbound is not None else Channel(DEFAULT_INBOUND_CAPACITY)
        self.registry = WorkerRegistry()
        self._lock = threading.Lock()
        self.dispatch_seconds: list[float] = []

    def register_worker(self, endpoint: str, channel: Channel) -> int:
        with self._lock:
            return self.registry.register(endpoint, channel)

    def deregister_worker(self, endpoint: str) -> int:
        with self._lock:
            return self.registry.deregister(endpoint)

    def dispatch_frame(self, frame: bytes) -> int:
        """Forward one encoded order; returns the worker index used."""
        t0 = time.perf_counter()
        with self._lock:
            index, _, channel = self.registry.take_next()
            elapsed = time.perf_counter() - t0
            out = splice_timing(frame, STAGE_NAME, elapsed)
            self.dispatch_seconds.append(elapsed)
        channel.send(out)
        return index

    def dispatch(self, order: InferenceOrder) -> int:
        return self.dispatch_frame(encode_order(order))

    def run(self, requeue_delay_s: float = 0.05) -> None:
        """Consume the inbound channel until it is closed, then close all
        worker channels."""
        while True:
            frame = self.inbound.recv()
            if frame is None:
                break
            try:
                self.dispatch_frame(frame)
            except NoWorkers:
                log.warning("no workers registered; requeueing order")
                time.sleep(requeue_delay_s)
                self.inbound.send(frame)
        with self._lock:
            for _, channel in self.registry._entries:
                channel.close()
