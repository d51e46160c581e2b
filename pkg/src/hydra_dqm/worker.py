"""Predict stage: FIFO-buffered inference over the plot type's model.

Each worker is a single sequential agent.  It resolves the active model
of the order's plot type (reloading when the active model changes),
computes normalized output weights, and attaches an activation heatmap
whenever the classification has Bad severity.  Undeliverable orders go
to a dead-letter log instead of aborting the loop.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from . import errors
from .classifier import ClassifierBackend, ReferenceClassifier, softmax
from .gradcam import gradcam
from .model import InferenceOrder, Report, Severity, argmax_index, now_ms
from .store import Store
from .transport import Channel
from .wire import decode_order, encode_report

log = logging.getLogger(__name__)

DEFAULT_BUFFER_CAPACITY = 256

STAGE_NAME = "predict"


class PredictWorker:
    """One predict process: bounded FIFO buffer plus an inference loop."""

    def __init__(self, store: Store, outbound: Channel, name: str = "worker-0",
                 buffer_capacity: int = DEFAULT_BUFFER_CAPACITY,
                 backend_cls: type[ClassifierBackend] = ReferenceClassifier,
                 dead_letter_dir: str | Path | None = None):
        self.store = store
        self.name = name
        self.buffer = Channel(buffer_capacity)
        self.outbound = outbound
        self.backend_cls = backend_cls
        self.dead_letter_dir = Path(dead_letter_dir) if dead_letter_dir else None
        self.dead_letters: list[tuple[int, str]] = []  # (order_id, reason)
        self._cache: dict[int, tuple[int, ClassifierBackend]] = {}

    # -- FIFO buffer ---------------------------------------------------

    def enqueue(self, frame: bytes) -> None:
        """Blocks while the buffer is full."""
        self.buffer.send(frame)

    def next(self, timeout: float | None = None):
        """Oldest buffered frame; blocks on an empty buffer."""
        return self.buffer.recv(timeout=timeout)

    # -- inference -------------------------------------------------------

    def _resolve_backend(self, plot_type_id: int):
        model = self.store.get_active_model(plot_type_id)
        if model is None:
            raise errors.NoActiveModel(f"plot type {plot_type_id} has no active model")
        cached = self._cache.get(plot_type_id)
        if cached is None or cached[0] != model.model_id:
            backend = self.backend_cls.load(model.artifact_path)
            self._cache[plot_type_id] = (model.model_id, backend)
        return model, self._cache[plot_type_id][1]

    def infer(self, order: InferenceOrder) -> Report:
        t0 = time.perf_counter()
        pt = self.store.get_plot_type(order.plot_type_id)
        expected = (pt.input_height, pt.input_width, pt.channels)
        if tuple(order.payload.shape) != expected:
            raise errors.ShapeMismatch(
                f"order {order.order_id} payload {order.payload.shape},"
                f" model input {expected}")
        model, backend = self._resolve_backend(order.plot_type_id)
        result = backend.infer(np.asarray(order.payload, dtype=np.float64))
        weights = softmax(result.logits)
        index = argmax_index(weights)
        label_id = model.label_order[index]
        heatmap = None
        if pt.label_by_id(label_id).severity is Severity.BAD:
            grads = backend.class_gradients(result, index)
            heatmap = gradcam(result.feature_maps, grads,
                              pt.input_height, pt.input_width)
        timings = dict(order.stage_timings)
        timings[STAGE_NAME] = time.perf_counter() - t0
        return Report(order.order_id, order.image_id, model.model_id, weights,
                      label_id, heatmap, timings, now_ms())

    def _dead_letter(self, order_id: int, reason: str, frame: bytes) -> None:
        self.dead_letters.append((order_id, reason))
        log.warning("%s dead-lettered order %d: %s", self.name, order_id, reason)
        if self.dead_letter_dir is not None:
            self.dead_letter_dir.mkdir(parents=True, exist_ok=True)
            (self.dead_letter_dir / f"order_{order_id}.bin").write_bytes(frame)

    def run(self) -> None:
        """Consume the buffer until closed; reports go out in arrival order."""
        while True:
            frame = self.buffer.recv()
            if frame is None:
                break
            order = decode_order(frame)
            try:
                report = self.infer(order)
            except errors.HydraError as exc:
                self._dead_letter(order.order_id, f"{type(exc).__name__}: {exc}", frame)
                continue
            self.outbound.send(encode_report(report))
