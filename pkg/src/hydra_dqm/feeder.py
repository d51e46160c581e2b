"""Directory-watching ingest stage.

Polls an input directory, validates the file naming convention, decodes
and resizes payloads to the plot type's model input shape, registers the
image, moves the original under the image root and emits one inference
order per file.  Processing is exactly-once per filename: the processed
set is persisted in the store and survives restarts.  Files that fail
any step are quarantined to the reject directory; a scan never aborts
because of one bad file.
"""

from __future__ import annotations

import logging
import shutil
import threading
import time
from pathlib import Path

from . import errors, imaging
from .model import InferenceOrder, now_ms
from .naming import parse_filename
from .store import Store
from .transport import Channel
from .wire import encode_order

log = logging.getLogger(__name__)

DEFAULT_POLL_MS = 500

STAGE_NAME = "feeder"


class Feeder:
    """Single scanning agent over one input directory."""

    def __init__(self, store: Store, input_dir: str | Path, image_root: str | Path,
                 reject_dir: str | Path, out: Channel | None = None,
                 poll_interval_s: float = DEFAULT_POLL_MS / 1000.0):
        self.store = store
        self.input_dir = Path(input_dir)
        self.image_root = Path(image_root)
        self.reject_dir = Path(reject_dir)
        self.out = out
        self.poll_interval_s = poll_interval_s
        # filename -> size seen on the previous poll (partial-write guard)
        self._pending_sizes: dict[str, int] = {}
        self.emitted = 0
        self.rejected = 0

    def _quarantine(self, path: Path, reason: str) -> None:
        self.reject_dir.mkdir(parents=True, exist_ok=True)
        target = self.reject_dir / path.name
        shutil.move(str(path), str(target))
        self.store.mark_processed(path.name)
        self._pending_sizes.pop(path.name, None)
        self.rejected += 1
        log.warning("quarantined %s: %s", path.name, reason)

    def _process_file(self, path: Path) -> InferenceOrder:
        t0 = time.perf_counter()
        fields = parse_filename(path.name)
        pt = self.store.get_plot_type_by_name(fields.plot_type_name)
        img = imaging.decode_image(path)
        height, width = img.shape[0], img.shape[1]
        payload = imaging.resize_bilinear(
            imaging.to_channels(img, pt.channels), pt.input_width, pt.input_height)
        record = self.store.register_image(pt.plot_type_id, fields.run_number,
                                           fields.sequence, fields.capture_time_ms,
                                           f"{pt.name}/{path.name}", width, height)
        dest = self.image_root / pt.name
        dest.mkdir(parents=True, exist_ok=True)
        shutil.move(str(path), str(dest / path.name))
        self.store.mark_processed(path.name)
        self._pending_sizes.pop(path.name, None)
        # order ids reuse the image id: unique per file identity across restarts
        return InferenceOrder(record.image_id, record.image_id, pt.plot_type_id,
                              payload.astype("float32"),
                              {STAGE_NAME: time.perf_counter() - t0}, now_ms())

    def scan_pass(self) -> tuple[list[InferenceOrder], bool]:
        """One poll: stabilize new files, emit the ready ones.

        Returns (orders emitted, whether the pass found any activity).
        """
        activity = False
        ready: list[tuple[tuple[int, int], Path]] = []
        for path in sorted(self.input_dir.iterdir()):
            if not path.is_file():
                continue
            if self.store.is_processed(path.name):
                continue
            try:
                size = path.stat().st_size
            except OSError:
                continue
            previous = self._pending_sizes.get(path.name)
            if previous is None or previous != size:
                # not yet size-stable across two consecutive polls
                self._pending_sizes[path.name] = size
                activity = True
                continue
            try:
                fields = parse_filename(path.name)
            except errors.MalformedName as exc:
                self._quarantine(path, str(exc))
                activity = True
                continue
            ready.append(((fields.capture_time_ms, fields.sequence), path))

        ready.sort(key=lambda item: item[0])
        orders = []
        for _, path in ready:
            activity = True
            try:
                order = self._process_file(path)
            except errors.HydraError as exc:
                self._quarantine(path, str(exc))
                continue
            if self.out is not None:
                self.out.send(encode_order(order))
            self.emitted += 1
            orders.append(order)
        return orders, activity

    def scan_and_emit(self) -> list[InferenceOrder]:
        """Scan until the directory is quiescent; returns the emitted orders."""
        all_orders = []
        while True:
            orders, activity = self.scan_pass()
            all_orders.extend(orders)
            if not activity:
                return all_orders

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            self.scan_pass()
            stop.wait(self.poll_interval_s)
