"""Keeper stage: confirmation, collection policy, persistence, alarms.

Consumes reports from all workers, checks the classification weight
against the per-label confirmation threshold, decides which images to
keep for future labeling, and writes both the permanent RunHistory row
and the short-retention RunTime row.  ConfirmedBad / Unconfirmed
outcomes raise alarm events on an in-process bus the API service
subscribes to.
"""

from __future__ import annotations

import hashlib
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import errors
from .imaging import write_pnm
from .model import (
    AlarmEvent,
    AlarmKind,
    CollectReason,
    Report,
    RunHistoryEntry,
    RunTimeEntry,
    Severity,
    now_ms,
)
from .store import Store
from .transport import Channel
from .wire import decode_report, encode_report

log = logging.getLogger(__name__)

STAGE_NAME = "keeper"


@dataclass(frozen=True)
class CollectionPolicy:
    """Per-model random-collection configuration."""

    collect_percentage: float
    rng_seed: int


def collection_draw(seed: int, image_id: int) -> float:
    """Uniform draw in [0, 1) keyed by (seed, image).

    A keyed hash rather than a sequential RNG stream, so the decision
    for a given image does not depend on the order reports arrive in
    (arrival order across workers is unspecified).
    """
    digest = hashlib.blake2b(f"{seed}:{image_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def confirm(report: Report, label_order, thresholds: dict[int, float]) -> bool:
    """Strictly-above threshold check on the classification's weight."""
    if report.classification not in thresholds:
        raise errors.MissingThreshold(
            f"no threshold for label {report.classification} of model {report.model_id}")
    index = list(label_order).index(report.classification)
    return float(report.output_weights[index]) > thresholds[report.classification]


def decide_collection(report: Report, confirmed: bool, policy: CollectionPolicy,
                      severity: Severity) -> tuple[bool, CollectReason]:
    """Reason precedence: BadClass, then Unconfirmed, then RandomSample."""
    if severity is Severity.BAD:
        return True, CollectReason.BAD_CLASS
    if not confirmed:
        return True, CollectReason.UNCONFIRMED
    if collection_draw(policy.rng_seed, report.image_id) < policy.collect_percentage:
        return True, CollectReason.RANDOM_SAMPLE
    return False, CollectReason.NONE


class AlarmBus:
    """Append-only alarm log with blocking cursor reads (long-poll style)."""

    def __init__(self):
        self._events: list[AlarmEvent] = []
        self._cond = threading.Condition()

    def publish(self, event: AlarmEvent) -> None:
        with self._cond:
            self._events.append(event)
            self._cond.notify_all()

    def read_since(self, cursor: int, timeout: float = 0.0) -> tuple[list[AlarmEvent], int]:
        """Events after ``cursor``; waits up to ``timeout`` if none yet."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while len(self._events) <= cursor:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(remaining)
            events = self._events[cursor:]
            return list(events), cursor + len(events)


class Keeper:
    """Single consuming agent over the merged report channel."""

    def __init__(self, store: Store, inbound: Channel, heatmap_dir: str | Path,
                 alarm_bus: AlarmBus | None = None, rng_seed: int | None = None,
                 dead_letter_dir: str | Path | None = None,
                 max_retries: int = 3, retry_backoff_s: float = 0.05):
        self.store = store
        self.inbound = inbound
        self.heatmap_dir = Path(heatmap_dir)
        self.alarm_bus = alarm_bus if alarm_bus is not None else AlarmBus()
        # entropy-seeded unless a test fixes the seed
        self.rng_seed = rng_seed if rng_seed is not None else int.from_bytes(
            hashlib.blake2b(str(time.time_ns()).encode(), digest_size=8).digest(), "little")
        self.dead_letter_dir = Path(dead_letter_dir) if dead_letter_dir else None
        self.max_retries = max_retries
        self.retry_backoff_s = retry_backoff_s
        self.handled = 0
        self.duplicates = 0

    def heatmap_path(self, inference_id: int) -> Path:
        return self.heatmap_dir / f"heatmap_{inference_id}.pgm"

    def _persist(self, action, *args):
        attempt = 0
        while True:
            try:
                return action(*args)
            except Exception:
                attempt += 1
                if attempt > self.max_retries:
                    raise
                time.sleep(self.retry_backoff_s * attempt)

    def handle_report(self, report: Report) -> RunHistoryEntry | None:
        """Process one report; returns the stored entry, or None for a
        duplicate order id (idempotent skip)."""
        if not self.store.claim_order(report.order_id):
            self.duplicates += 1
            log.warning("duplicate order %d skipped", report.order_id)
            return None
        t0 = time.perf_counter()
        try:
            model = self.store.get_model(report.model_id)
            image = self.store.get_image(report.image_id)
            plot_type = self.store.get_plot_type(image.plot_type_id)
            thresholds = self.store.get_thresholds(report.model_id)
            confirmed = confirm(report, model.label_order, thresholds)
            severity = plot_type.label_by_id(report.classification).severity
            policy = CollectionPolicy(model.collect_percentage, self.rng_seed)
            collected, reason = decide_collection(report, confirmed, policy, severity)

            timings = dict(report.stage_timings)
            timings[STAGE_NAME] = time.perf_counter() - t0
            entry = RunHistoryEntry(0, report.image_id, report.model_id,
                                    tuple(float(w) for w in report.output_weights),
                                    report.classification, confirmed, collected,
                                    reason, timings, report.inferred_at)
            inference_id = self._persist(self.store.record_inference, entry)

            gradcam_ref = None
            if report.gradcam is not None:
                self.heatmap_dir.mkdir(parents=True, exist_ok=True)
                path = self.heatmap_path(inference_id)
                write_pnm(path, report.gradcam)
                gradcam_ref = str(path)

            self._persist(self.store.upsert_runtime, RunTimeEntry(
                inference_id, image.plot_type_id, image.storage_path, gradcam_ref,
                report.classification, confirmed, report.inferred_at))
            if collected:
                self._persist(self.store.enqueue_for_labeling, report.image_id)

            if confirmed and severity is Severity.BAD:
                self.alarm_bus.publish(AlarmEvent(inference_id, image.plot_type_id,
                                                  AlarmKind.CONFIRMED_BAD, now_ms()))
            elif not confirmed:
                self.alarm_bus.publish(AlarmEvent(inference_id, image.plot_type_id,
                                                  AlarmKind.UNCONFIRMED, now_ms()))
            self.handled += 1
            return self.store.get_inference(inference_id)
        except Exception as exc:
            self._dead_letter(report, repr(exc))
            return None

    def _dead_letter(self, report: Report, reason: str) -> None:
        log.error("dead-lettering report for order %d: %s", report.order_id, reason)
        if self.dead_letter_dir is not None:
            self.dead_letter_dir.mkdir(parents=True, exist_ok=True)
            path = self.dead_letter_dir / f"report_{report.order_id}.bin"
            path.write_bytes(encode_report(report))

    def run(self) -> None:
        while True:
            frame = self.inbound.recv()
            if frame is None:
                break
            self.handle_report(decode_report(frame))
