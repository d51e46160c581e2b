"""Persistence interface with in-memory and sqlite-backed implementations.

Both implementations expose the same operations and the same semantics:
append-only history, label supersession, a short-retention runtime view,
and atomic plot-type registration / active-model swaps.  All methods are
safe for concurrent use from the pipeline stages and the API service;
writes are serialized behind a lock.

The sqlite schema is documented in docs/schema.md and can be created
with ``hydra-dqm schema-init``.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from abc import ABC, abstractmethod

from . import errors
from .model import (
    CollectReason,
    ImageRecord,
    LabelAssignment,
    LabelDef,
    ModelRecord,
    PlotType,
    RunHistoryEntry,
    RunTimeEntry,
    Severity,
    ThresholdConfig,
    TrainingSet,
    argmax_index,
    now_ms,
    validate_weights,
)

DEFAULT_RETENTION_S = 300.0

_PATH_SEPARATORS = ("/", "\\")


def _validate_taxonomy(name: str, input_width: int, input_height: int,
                       channels: int, labels) -> None:
    if not name or any(sep in name for sep in _PATH_SEPARATORS):
        raise errors.ValidationError(f"invalid plot type name {name!r}")
    if input_width < 8 or input_height < 8:
        raise errors.ValidationError("input dimensions must be >= 8")
    if channels not in (1, 3):
        raise errors.ValidationError("channels must be 1 or 3")
    if len(labels) < 2:
        raise errors.InvalidLabelSet("at least 2 labels required")
    severities = [Severity(sev) for _, _, sev in labels]
    if sum(1 for s in severities if s is Severity.GOOD) != 1:
        raise errors.InvalidLabelSet("exactly one Good label required")
    if not any(s is Severity.BAD for s in severities):
        raise errors.InvalidLabelSet("at least one Bad label required")
    label_names = [n for n, _, _ in labels]
    if len(set(label_names)) != len(label_names):
        raise errors.InvalidLabelSet("duplicate label names")
    if any(not n for n in label_names):
        raise errors.InvalidLabelSet("empty label name")


def _validate_entry(entry: RunHistoryEntry, model: ModelRecord) -> tuple[float, ...]:
    weights = validate_weights(entry.output_weights, len(model.label_order))
    expected = model.label_order[argmax_index(weights)]
    if entry.classification != expected:
        raise errors.MalformedWeights(
            f"classification {entry.classification} is not the argmax label {expected}")
    return weights


def _validate_thresholds(model: ModelRecord, thresholds: dict[int, float]) -> None:
    if set(thresholds) != set(model.label_order):
        raise errors.ValidationError("thresholds must cover every label of the model")
    for label_id, value in thresholds.items():
        if not (0.0 <= value <= 1.0):
            raise errors.ValidationError(f"threshold {value!r} for label {label_id} outside [0, 1]")


def entry_to_json(entry: RunHistoryEntry) -> str:
    """Canonical byte representation used by append-only re-read checks."""
    return json.dumps({
        "inference_id": entry.inference_id,
        "image_id": entry.image_id,
        "model_id": entry.model_id,
        "output_weights": list(entry.output_weights),
        "classification": entry.classification,
        "confirmed": entry.confirmed,
        "collected": entry.collected,
        "collect_reason": entry.collect_reason.value,
        "stage_timings": list(entry.stage_timings.items()),
        "inferred_at": entry.inferred_at,
    }, sort_keys=True)


class Store(ABC):
    """Persistence contract shared by every pipeline stage."""

    # -- plot types / labels ----------------------------------------

    @abstractmethod
    def register_plot_type(self, name: str, input_width: int, input_height: int,
                           channels: int, labels, allowed_labelers=()) -> PlotType:
        """Atomically create a plot type and its label set.

        ``labels`` is a list of (name, (r, g, b), severity) triples.
        """

    @abstractmethod
    def get_plot_type(self, plot_type_id: int) -> PlotType: ...

    @abstractmethod
    def get_plot_type_by_name(self, name: str) -> PlotType: ...

    @abstractmethod
    def list_plot_types(self) -> list[PlotType]: ...

    @abstractmethod
    def allow_labeler(self, plot_type_id: int, user: str) -> None: ...

    @abstractmethod
    def get_label(self, label_id: int) -> LabelDef: ...

    # -- images ------------------------------------------------------

    @abstractmethod
    def register_image(self, plot_type_id: int, run_number: int, sequence: int,
                       capture_time: int, storage_path: str,
                       width: int, height: int) -> ImageRecord: ...

    @abstractmethod
    def get_image(self, image_id: int) -> ImageRecord: ...

    @abstractmethod
    def find_image(self, plot_type_id: int, run_number: int,
                   sequence: int) -> ImageRecord | None: ...

    # -- models / thresholds / training sets -------------------------

    @abstractmethod
    def register_model(self, plot_type_id: int, artifact_path: str, label_order,
                       sampling_method: str = "manual", training_set_id: int | None = None,
                       collect_percentage: float = 0.0) -> ModelRecord: ...

    @abstractmethod
    def get_model(self, model_id: int) -> ModelRecord: ...

    @abstractmethod
    def list_models(self, plot_type_id: int) -> list[ModelRecord]: ...

    @abstractmethod
    def set_active_model(self, model_id: int) -> int | None:
        """Make ``model_id`` the single active model of its plot type.

        Returns the previously active model id (None if there was none).
        """

    @abstractmethod
    def get_active_model(self, plot_type_id: int) -> ModelRecord | None: ...

    @abstractmethod
    def set_thresholds(self, model_id: int, thresholds: dict[int, float]) -> list[ThresholdConfig]: ...

    @abstractmethod
    def get_thresholds(self, model_id: int) -> dict[int, float]: ...

    @abstractmethod
    def create_training_set(self, plot_type_id: int, members,
                            sampling_method: str = "manual") -> TrainingSet: ...

    @abstractmethod
    def get_training_set(self, training_set_id: int) -> TrainingSet: ...

    # -- labeling ----------------------------------------------------

    @abstractmethod
    def assign_label(self, image_id: int, label_id: int, labeler: str,
                     assigned_at: int | None = None) -> LabelAssignment:
        """Supersede any current assignment and make this one current."""

    @abstractmethod
    def current_label(self, image_id: int) -> LabelAssignment | None: ...

    @abstractmethod
    def label_history(self, image_id: int) -> list[LabelAssignment]: ...

    @abstractmethod
    def query_labeled(self, plot_type_id: int, label_id: int | None = None,
                      t_from: int | None = None, t_to: int | None = None
                      ) -> list[tuple[ImageRecord, LabelAssignment]]: ...

    @abstractmethod
    def query_unlabeled(self, plot_type_id: int, limit: int,
                        t_from: int | None = None, t_to: int | None = None
                        ) -> list[ImageRecord]:
        """Collected-but-unlabeled images, oldest capture_time first."""

    @abstractmethod
    def enqueue_for_labeling(self, image_id: int) -> None: ...

    # -- run history / runtime ---------------------------------------

    @abstractmethod
    def record_inference(self, entry: RunHistoryEntry) -> int:
        """Append one immutable inference record; returns its id."""

    @abstractmethod
    def get_inference(self, inference_id: int) -> RunHistoryEntry: ...

    @abstractmethod
    def query_inferences(self, plot_type_id: int | None = None,
                         model_id: int | None = None, image_id: int | None = None,
                         t_from: int | None = None, t_to: int | None = None
                         ) -> list[RunHistoryEntry]: ...

    @abstractmethod
    def claim_order(self, order_id: int) -> bool:
        """Record an order id; False if it was already claimed (duplicate)."""

    @abstractmethod
    def upsert_runtime(self, entry: RunTimeEntry) -> bool: ...

    @abstractmethod
    def query_runtime(self, plot_type_id: int, now: int | None = None) -> list[RunTimeEntry]:
        """Entries within the retention window ending at ``now``."""

    @abstractmethod
    def query_weight_series(self, plot_type_id: int, t_from: int, t_to: int
                            ) -> dict[str, list[tuple[int, float]]]:
        """Per-label-name (timestamp, weight) series over the window."""

    # -- feeder bookkeeping -------------------------------------------

    @abstractmethod
    def mark_processed(self, filename: str) -> None: ...

    @abstractmethod
    def is_processed(self, filename: str) -> bool: ...


class MemoryStore(Store):
    """Dict-backed store used by tests and single-process experiments."""

    def __init__(self, retention_window_s: float = DEFAULT_RETENTION_S):
        self._lock = threading.RLock()
        self.retention_window_s = retention_window_s
        self._plot_types: dict[int, dict] = {}
        self._labels: dict[int, LabelDef] = {}
        self._images: dict[int, ImageRecord] = {}
        self._image_keys: dict[tuple[int, int, int], int] = {}
        self._models: dict[int, ModelRecord] = {}
        self._thresholds: dict[int, dict[int, float]] = {}
        self._training_sets: dict[int, TrainingSet] = {}
        self._assignments: dict[int, list[LabelAssignment]] = {}
        self._labeling_queue: dict[int, int] = {}  # image_id -> enqueued_at
        self._history: dict[int, RunHistoryEntry] = {}
        self._claimed_orders: set[int] = set()
        self._runtime: dict[int, RunTimeEntry] = {}
        self._processed: set[str] = set()
        self._next_id = {"plot_type": 1, "label": 1, "image": 1, "model": 1,
                         "training_set": 1, "assignment": 1, "inference": 1}

    def _take_id(self, kind: str) -> int:
        n = self._next_id[kind]
        self._next_id[kind] = n + 1
        return n

    # -- plot types ----------------------------------------------------

    def register_plot_type(self, name, input_width, input_height, channels,
                           labels, allowed_labelers=()):
        _validate_taxonomy(name, input_width, input_height, channels, labels)
        with self._lock:
            if any(pt["name"] == name for pt in self._plot_types.values()):
                raise errors.DuplicateName(f"plot type {name!r} already exists")
            pt_id = self._take_id("plot_type")
            label_defs = []
            for label_name, color, severity in labels:
                lab = LabelDef(self._take_id("label"), pt_id, label_name,
                               tuple(int(c) for c in color), Severity(severity))
                self._labels[lab.label_id] = lab
                label_defs.append(lab)
            self._plot_types[pt_id] = {
                "name": name, "input_width": input_width, "input_height": input_height,
                "channels": channels, "allowed_labelers": set(allowed_labelers),
                "label_ids": [lab.label_id for lab in label_defs],
            }
            return self.get_plot_type(pt_id)

    def _plot_type(self, plot_type_id) -> dict:
        pt = self._plot_types.get(plot_type_id)
        if pt is None:
            raise errors.UnknownPlotType(f"plot type {plot_type_id}")
        return pt

    def get_plot_type(self, plot_type_id):
        with self._lock:
            pt = self._plot_type(plot_type_id)
            return PlotType(plot_type_id, pt["name"], pt["input_width"],
                            pt["input_height"], pt["channels"],
                            frozenset(pt["allowed_labelers"]),
                            tuple(self._labels[i] for i in pt["label_ids"]))

    def get_plot_type_by_name(self, name):
        with self._lock:
            for pt_id, pt in self._plot_types.items():
                if pt["name"] == name:
                    return self.get_plot_type(pt_id)
        raise errors.UnknownPlotType(f"plot type {name!r}")

    def list_plot_types(self):
        with self._lock:
            return [self.get_plot_type(pt_id) for pt_id in sorted(self._plot_types)]

    def allow_labeler(self, plot_type_id, user):
        with self._lock:
            self._plot_type(plot_type_id)["allowed_labelers"].add(user)

    def get_label(self, label_id):
        with self._lock:
            lab = self._labels.get(label_id)
            if lab is None:
                raise errors.UnknownLabel(f"label {label_id}")
            return lab

    # -- images ----------------------------------------------------------

    def register_image(self, plot_type_id, run_number, sequence, capture_time,
                       storage_path, width, height):
        with self._lock:
            self._plot_type(plot_type_id)
            key = (plot_type_id, run_number, sequence)
            if key in self._image_keys:
                raise errors.DuplicateImage(f"image {key} already registered")
            rec = ImageRecord(self._take_id("image"), plot_type_id, run_number,
                              sequence, capture_time, storage_path, width, height)
            self._images[rec.image_id] = rec
            self._image_keys[key] = rec.image_id
            return rec

    def get_image(self, image_id):
        with self._lock:
            rec = self._images.get(image_id)
            if rec is None:
                raise errors.UnknownImage(f"image {image_id}")
            return rec

    def find_image(self, plot_type_id, run_number, sequence):
        with self._lock:
            image_id = self._image_keys.get((plot_type_id, run_number, sequence))
            return self._images.get(image_id) if image_id is not None else None

    # -- models ------------------------------------------------------------

    def register_model(self, plot_type_id, artifact_path, label_order,
                       sampling_method="manual", training_set_id=None,
                       collect_percentage=0.0):
        with self._lock:
            pt = self._plot_type(plot_type_id)
            if sorted(label_order) != sorted(pt["label_ids"]):
                raise errors.ValidationError("label_order must permute the plot type's labels")
            rec = ModelRecord(self._take_id("model"), plot_type_id, artifact_path,
                              tuple(label_order), False, training_set_id,
                              sampling_method, now_ms(), collect_percentage)
            self._models[rec.model_id] = rec
            return rec

    def get_model(self, model_id):
        with self._lock:
            rec = self._models.get(model_id)
            if rec is None:
                raise errors.UnknownModel(f"model {model_id}")
            return rec

    def list_models(self, plot_type_id):
        with self._lock:
            self._plot_type(plot_type_id)
            return [m for _, m in sorted(self._models.items())
                    if m.plot_type_id == plot_type_id]

    def set_active_model(self, model_id):
        from dataclasses import replace
        with self._lock:
            model = self.get_model(model_id)
            previous = None
            for mid, m in self._models.items():
                if m.plot_type_id == model.plot_type_id and m.active:
                    previous = mid
                    self._models[mid] = replace(m, active=False)
            self._models[model_id] = replace(self._models[model_id], active=True)
            return previous

    def get_active_model(self, plot_type_id):
        with self._lock:
            self._plot_type(plot_type_id)
            for _, m in sorted(self._models.items()):
                if m.plot_type_id == plot_type_id and m.active:
                    return m
            return None

    def set_thresholds(self, model_id, thresholds):
        with self._lock:
            model = self.get_model(model_id)
            _validate_thresholds(model, thresholds)
            self._thresholds[model_id] = dict(thresholds)
            return [ThresholdConfig(model_id, lid, thresholds[lid])
                    for lid in model.label_order]

    def get_thresholds(self, model_id):
        with self._lock:
            self.get_model(model_id)
            return dict(self._thresholds.get(model_id, {}))

    def create_training_set(self, plot_type_id, members, sampling_method="manual"):
        with self._lock:
            self._plot_type(plot_type_id)
            members = tuple((int(i), int(l)) for i, l in members)
            for image_id, label_id in members:
                current = self.current_label(image_id)
                if current is None or current.label_id != label_id:
                    raise errors.ValidationError(
                        f"image {image_id} is not currently labeled {label_id}")
            ts = TrainingSet(self._take_id("training_set"), plot_type_id,
                             members, sampling_method, now_ms())
            self._training_sets[ts.training_set_id] = ts
            return ts

    def get_training_set(self, training_set_id):
        with self._lock:
            ts = self._training_sets.get(training_set_id)
            if ts is None:
                raise errors.UnknownEntityError(f"training set {training_set_id}")
            return ts

    # -- labeling -----------------------------------------------------------

    def assign_label(self, image_id, label_id, labeler, assigned_at=None):
        with self._lock:
            image = self.get_image(image_id)
            label = self.get_label(label_id)
            if label.plot_type_id != image.plot_type_id:
                raise errors.LabelPlotTypeMismatch(
                    f"label {label_id} does not belong to plot type {image.plot_type_id}")
            pt = self._plot_type(image.plot_type_id)
            if labeler not in pt["allowed_labelers"]:
                raise errors.PermissionDenied(f"{labeler!r} may not label this plot type")
            history = self._assignments.setdefault(image_id, [])
            from dataclasses import replace
            for i, a in enumerate(history):
                if not a.superseded:
                    history[i] = replace(a, superseded=True)
            assignment = LabelAssignment(self._take_id("assignment"), image_id,
                                         label_id, labeler,
                                         assigned_at if assigned_at is not None else now_ms(),
                                         False)
            history.append(assignment)
            return assignment

    def current_label(self, image_id):
        with self._lock:
            for a in self._assignments.get(image_id, []):
                if not a.superseded:
                    return a
            return None

    def label_history(self, image_id):
        with self._lock:
            return list(self._assignments.get(image_id, []))

    def query_labeled(self, plot_type_id, label_id=None, t_from=None, t_to=None):
        with self._lock:
            self._plot_type(plot_type_id)
            out = []
            for image_id, history in self._assignments.items():
                image = self._images[image_id]
                if image.plot_type_id != plot_type_id:
                    continue
                current = next((a for a in history if not a.superseded), None)
                if current is None:
                    continue
                if label_id is not None and current.label_id != label_id:
                    continue
                if t_from is not None and current.assigned_at < t_from:
                    continue
                if t_to is not None and current.assigned_at > t_to:
                    continue
                out.append((image, current))
            out.sort(key=lambda pair: (pair[1].assigned_at, pair[1].assignment_id))
            return out

    def query_unlabeled(self, plot_type_id, limit, t_from=None, t_to=None):
        if limit < 1:
            raise errors.InvalidLimit("limit must be >= 1")
        with self._lock:
            self._plot_type(plot_type_id)
            candidates = []
            for image_id in self._labeling_queue:
                image = self._images[image_id]
                if image.plot_type_id != plot_type_id:
                    continue
                if self.current_label(image_id) is not None:
                    continue
                if t_from is not None and image.capture_time < t_from:
                    continue
                if t_to is not None and image.capture_time > t_to:
                    continue
                candidates.append(image)
            candidates.sort(key=lambda r: (r.capture_time, r.sequence, r.image_id))
            return candidates[:limit]

    def enqueue_for_labeling(self, image_id):
        with self._lock:
            self.get_image(image_id)
            self._labeling_queue.setdefault(image_id, now_ms())

    # -- run history / runtime ------------------------------------------------

    def record_inference(self, entry):
        with self._lock:
            self.get_image(entry.image_id)
            model = self.get_model(entry.model_id)
            weights = _validate_entry(entry, model)
            inference_id = self._take_id("inference")
            stored = RunHistoryEntry(inference_id, entry.image_id, entry.model_id,
                                     weights, entry.classification, entry.confirmed,
                                     entry.collected, entry.collect_reason,
                                     dict(entry.stage_timings), entry.inferred_at)
            self._history[inference_id] = stored
            return inference_id

    def get_inference(self, inference_id):
        with self._lock:
            entry = self._history.get(inference_id)
            if entry is None:
                raise errors.UnknownEntityError(f"inference {inference_id}")
            return RunHistoryEntry(entry.inference_id, entry.image_id, entry.model_id,
                                   entry.output_weights, entry.classification,
                                   entry.confirmed, entry.collected, entry.collect_reason,
                                   dict(entry.stage_timings), entry.inferred_at)

    def query_inferences(self, plot_type_id=None, model_id=None, image_id=None,
                         t_from=None, t_to=None):
        with self._lock:
            out = []
            for inference_id in sorted(self._history):
                entry = self._history[inference_id]
                if model_id is not None and entry.model_id != model_id:
                    continue
                if image_id is not None and entry.image_id != image_id:
                    continue
                if plot_type_id is not None:
                    if self._images[entry.image_id].plot_type_id != plot_type_id:
                        continue
                if t_from is not None and entry.inferred_at < t_from:
                    continue
                if t_to is not None and entry.inferred_at > t_to:
                    continue
                out.append(self.get_inference(inference_id))
            out.sort(key=lambda e: (e.inferred_at, e.inference_id))
            return out

    def claim_order(self, order_id):
        with self._lock:
            if order_id in self._claimed_orders:
                return False
            self._claimed_orders.add(order_id)
            return True

    def upsert_runtime(self, entry):
        with self._lock:
            self._runtime[entry.inference_id] = entry
            window_ms = int(self.retention_window_s * 1000)
            latest = max(e.inferred_at for e in self._runtime.values())
            for inference_id in [i for i, e in self._runtime.items()
                                 if latest - e.inferred_at >= window_ms]:
                del self._runtime[inference_id]
            return True

    def query_runtime(self, plot_type_id, now=None):
        now = now if now is not None else now_ms()
        window_ms = int(self.retention_window_s * 1000)
        with self._lock:
            out = [e for e in self._runtime.values()
                   if e.plot_type_id == plot_type_id and now - e.inferred_at < window_ms]
            out.sort(key=lambda e: (e.inferred_at, e.inference_id))
            return out

    def query_weight_series(self, plot_type_id, t_from, t_to):
        if t_from > t_to:
            raise errors.ValidationError("window start after end")
        with self._lock:
            pt = self.get_plot_type(plot_type_id)
            series: dict[str, list[tuple[int, float]]] = {}
            active = self.get_active_model(plot_type_id)
            if active is not None:
                for label_id in active.label_order:
                    series[self._labels[label_id].name] = []
            for entry in self.query_inferences(plot_type_id=plot_type_id,
                                               t_from=t_from, t_to=t_to):
                order = self._models[entry.model_id].label_order
                for label_id, weight in zip(order, entry.output_weights):
                    name = self._labels[label_id].name
                    series.setdefault(name, []).append((entry.inferred_at, weight))
            return series

    # -- feeder bookkeeping -----------------------------------------------------

    def mark_processed(self, filename):
        with self._lock:
            self._processed.add(filename)

    def is_processed(self, filename):
        with self._lock:
            return filename in self._processed


SCHEMA_STATEMENTS = [
    """CREATE TABLE IF NOT EXISTS plot_types (
        plot_type_id INTEGER PRIMARY KEY AUTOINCREMENT,
        name TEXT NOT NULL UNIQUE,
        input_width INTEGER NOT NULL,
        input_height INTEGER NOT NULL,
        channels INTEGER NOT NULL)""",
    """CREATE TABLE IF NOT EXISTS allowed_labelers (
        plot_type_id INTEGER NOT NULL REFERENCES plot_types(plot_type_id),
        user_id TEXT NOT NULL,
        PRIMARY KEY (plot_type_id, user_id))""",
    """CREATE TABLE IF NOT EXISTS labels (
        label_id INTEGER PRIMARY KEY AUTOINCREMENT,
        plot_type_id INTEGER NOT NULL REFERENCES plot_types(plot_type_id),
        name TEXT NOT NULL,
        color_r INTEGER NOT NULL, color_g INTEGER NOT NULL, color_b INTEGER NOT NULL,
        severity TEXT NOT NULL,
        UNIQUE (plot_type_id, name))""",
    """CREATE TABLE IF NOT EXISTS images (
        image_id INTEGER PRIMARY KEY AUTOINCREMENT,
        plot_type_id INTEGER NOT NULL REFERENCES plot_types(plot_type_id),
        run_number INTEGER NOT NULL,
        sequence INTEGER NOT NULL,
        capture_time_ms INTEGER NOT NULL,
        storage_path TEXT NOT NULL,
        width INTEGER NOT NULL, height INTEGER NOT NULL,
        UNIQUE (plot_type_id, run_number, sequence))""",
    """CREATE TABLE IF NOT EXISTS models (
        model_id INTEGER PRIMARY KEY AUTOINCREMENT,
        plot_type_id INTEGER NOT NULL REFERENCES plot_types(plot_type_id),
        artifact_path TEXT NOT NULL,
        label_order TEXT NOT NULL,
        active INTEGER NOT NULL DEFAULT 0,
        training_set_id INTEGER,
        sampling_method TEXT NOT NULL,
        created_at_ms INTEGER NOT NULL,
        collect_percentage REAL NOT NULL DEFAULT 0.0)""",
    """CREATE TABLE IF NOT EXISTS thresholds (
        model_id INTEGER NOT NULL REFERENCES models(model_id),
        label_id INTEGER NOT NULL REFERENCES labels(label_id),
        threshold REAL NOT NULL,
        PRIMARY KEY (model_id, label_id))""",
    """CREATE TABLE IF NOT EXISTS training_sets (
        training_set_id INTEGER PRIMARY KEY AUTOINCREMENT,
        plot_type_id INTEGER NOT NULL REFERENCES plot_types(plot_type_id),
        sampling_method TEXT NOT NULL,
        created_at_ms INTEGER NOT NULL)""",
    """CREATE TABLE IF NOT EXISTS training_set_members (
        training_set_id INTEGER NOT NULL REFERENCES training_sets(training_set_id),
        position INTEGER NOT NULL,
        image_id INTEGER NOT NULL REFERENCES images(image_id),
        label_id INTEGER NOT NULL REFERENCES labels(label_id),
        PRIMARY KEY (training_set_id, position))""",
    """CREATE TABLE IF NOT EXISTS label_assignments (
        assignment_id INTEGER PRIMARY KEY AUTOINCREMENT,
        image_id INTEGER NOT NULL REFERENCES images(image_id),
        label_id INTEGER NOT NULL REFERENCES labels(label_id),
        labeler TEXT NOT NULL,
        assigned_at_ms INTEGER NOT NULL,
        superseded INTEGER NOT NULL DEFAULT 0)""",
    """CREATE TABLE IF NOT EXISTS labeling_queue (
        image_id INTEGER PRIMARY KEY REFERENCES images(image_id),
        enqueued_at_ms INTEGER NOT NULL)""",
    """CREATE TABLE IF NOT EXISTS run_history (
        inference_id INTEGER PRIMARY KEY AUTOINCREMENT,
        image_id INTEGER NOT NULL REFERENCES images(image_id),
        model_id INTEGER NOT NULL REFERENCES models(model_id),
        output_weights TEXT NOT NULL,
        classification INTEGER NOT NULL,
        confirmed INTEGER NOT NULL,
        collected INTEGER NOT NULL,
        collect_reason TEXT NOT NULL,
        stage_timings TEXT NOT NULL,
        inferred_at_ms INTEGER NOT NULL)""",
    """CREATE TABLE IF NOT EXISTS claimed_orders (
        order_id INTEGER PRIMARY KEY)""",
    """CREATE TABLE IF NOT EXISTS runtime_entries (
        inference_id INTEGER PRIMARY KEY,
        plot_type_id INTEGER NOT NULL REFERENCES plot_types(plot_type_id),
        image_ref TEXT NOT NULL,
        gradcam_ref TEXT,
        classification INTEGER NOT NULL,
        confirmed INTEGER NOT NULL,
        inferred_at_ms INTEGER NOT NULL)""",
    """CREATE TABLE IF NOT EXISTS processed_files (
        filename TEXT PRIMARY KEY)""",
    "CREATE INDEX IF NOT EXISTS idx_history_time ON run_history(inferred_at_ms)",
    "CREATE INDEX IF NOT EXISTS idx_history_image ON run_history(image_id)",
    "CREATE INDEX IF NOT EXISTS idx_runtime_time ON runtime_entries(inferred_at_ms)",
    "CREATE INDEX IF NOT EXISTS idx_assignments_image ON label_assignments(image_id)",
]


def init_schema(db_path: str) -> None:
    """Create all tables in a sqlite database file (idempotent)."""
    conn = sqlite3.connect(db_path)
    try:
        for stmt in SCHEMA_STATEMENTS:
            conn.execute(stmt)
        conn.commit()
    finally:
        conn.close()


class SqliteStore(Store):
    """Embedded relational store, one sqlite file per deployment."""

    def __init__(self, db_path: str, retention_window_s: float = DEFAULT_RETENTION_S):
        self._lock = threading.RLock()
        self.retention_window_s = retention_window_s
        self.db_path = db_path
        self._conn = sqlite3.connect(db_path, check_same_thread=False, timeout=30.0)
        self._conn.execute("PRAGMA journal_mode = WAL")
        self._conn.execute("PRAGMA foreign_keys = ON")
        for stmt in SCHEMA_STATEMENTS:
            self._conn.execute(stmt)
        self._conn.commit()

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # -- plot types ----------------------------------------------------

    def register_plot_type(self, name, input_width, input_height, channels,
                           labels, allowed_labelers=()):
        _validate_taxonomy(name, input_width, input_height, channels, labels)
        with self._lock:
            try:
                cur = self._conn.execute(
                    "INSERT INTO plot_types (name, input_width, input_height, channels)"
                    " VALUES (?, ?, ?, ?)", (name, input_width, input_height, channels))
                pt_id = cur.lastrowid
                for label_name, color, severity in labels:
                    r, g, b = (int(c) for c in color)
                    self._conn.execute(
                        "INSERT INTO labels (plot_type_id, name, color_r, color_g,"
                        " color_b, severity) VALUES (?, ?, ?, ?, ?, ?)",
                        (pt_id, label_name, r, g, b, Severity(severity).value))
                for user in allowed_labelers:
                    self._conn.execute(
                        "INSERT INTO allowed_labelers (plot_type_id, user_id) VALUES (?, ?)",
                        (pt_id, user))
            except sqlite3.IntegrityError as exc:
                self._conn.rollback()
                raise errors.DuplicateName(f"plot type {name!r} already exists") from exc
            self._conn.commit()
            return self.get_plot_type(pt_id)

    def get_plot_type(self, plot_type_id):
        with self._lock:
            row = self._conn.execute(
                "SELECT plot_type_id, name, input_width, input_height, channels"
                " FROM plot_types WHERE plot_type_id = ?", (plot_type_id,)).fetchone()
            if row is None:
                raise errors.UnknownPlotType(f"plot type {plot_type_id}")
            return self._plot_type_from_row(row)

    def _plot_type_from_row(self, row):
        pt_id = row[0]
        labelers = frozenset(
            r[0] for r in self._conn.execute(
                "SELECT user_id FROM allowed_labelers WHERE plot_type_id = ?", (pt_id,)))
        labels = tuple(
            LabelDef(r[0], pt_id, r[1], (r[2], r[3], r[4]), Severity(r[5]))
            for r in self._conn.execute(
                "SELECT label_id, name, color_r, color_g, color_b, severity"
                " FROM labels WHERE plot_type_id = ? ORDER BY label_id", (pt_id,)))
        return PlotType(pt_id, row[1], row[2], row[3], row[4], labelers, labels)

    def get_plot_type_by_name(self, name):
        with self._lock:
            row = self._conn.execute(
                "SELECT plot_type_id, name, input_width, input_height, channels"
                " FROM plot_types WHERE name = ?", (name,)).fetchone()
            if row is None:
                raise errors.UnknownPlotType(f"plot type {name!r}")
            return self._plot_type_from_row(row)

    def list_plot_types(self):
        with self._lock:
            rows = self._conn.execute(
                "SELECT plot_type_id, name, input_width, input_height, channels"
                " FROM plot_types ORDER BY plot_type_id").fetchall()
            return [self._plot_type_from_row(r) for r in rows]

    def allow_labeler(self, plot_type_id, user):
        with self._lock:
            self.get_plot_type(plot_type_id)
            self._conn.execute(
                "INSERT OR IGNORE INTO allowed_labelers (plot_type_id, user_id)"
                " VALUES (?, ?)", (plot_type_id, user))
            self._conn.commit()

    def get_label(self, label_id):
        with self._lock:
            row = self._conn.execute(
                "SELECT label_id, plot_type_id, name, color_r, color_g, color_b, severity"
                " FROM labels WHERE label_id = ?", (label_id,)).fetchone()
            if row is None:
                raise errors.UnknownLabel(f"label {label_id}")
            return LabelDef(row[0], row[1], row[2], (row[3], row[4], row[5]),
                            Severity(row[6]))

    # -- images ------------------------------------------------------------

    def register_image(self, plot_type_id, run_number, sequence, capture_time,
                       storage_path, width, height):
        with self._lock:
            self.get_plot_type(plot_type_id)
            try:
                cur = self._conn.execute(
                    "INSERT INTO images (plot_type_id, run_number, sequence,"
                    " capture_time_ms, storage_path, width, height)"
                    " VALUES (?, ?, ?, ?, ?, ?, ?)",
                    (plot_type_id, run_number, sequence, capture_time,
                     storage_path, width, height))
            except sqlite3.IntegrityError as exc:
                self._conn.rollback()
                raise errors.DuplicateImage(
                    f"image ({plot_type_id}, {run_number}, {sequence}) already registered"
                ) from exc
            self._conn.commit()
            return ImageRecord(cur.lastrowid, plot_type_id, run_number, sequence,
                               capture_time, storage_path, width, height)

    def get_image(self, image_id):
        with self._lock:
            row = self._conn.execute(
                "SELECT image_id, plot_type_id, run_number, sequence, capture_time_ms,"
                " storage_path, width, height FROM images WHERE image_id = ?",
                (image_id,)).fetchone()
            if row is None:
                raise errors.UnknownImage(f"image {image_id}")
            return ImageRecord(*row)

    def find_image(self, plot_type_id, run_number, sequence):
        with self._lock:
            row = self._conn.execute(
                "SELECT image_id, plot_type_id, run_number, sequence, capture_time_ms,"
                " storage_path, width, height FROM images"
                " WHERE plot_type_id = ? AND run_number = ? AND sequence = ?",
                (plot_type_id, run_number, sequence)).fetchone()
            return ImageRecord(*row) if row else None

    # -- models ---------------------------------------------------------------

    def register_model(self, plot_type_id, artifact_path, label_order,
                       sampling_method="manual", training_set_id=None,
                       collect_percentage=0.0):
        with self._lock:
            pt = self.get_plot_type(plot_type_id)
            if sorted(label_order) != sorted(l.label_id for l in pt.labels):
                raise errors.ValidationError("label_order must permute the plot type's labels")
            created = now_ms()
            cur = self._conn.execute(
                "INSERT INTO models (plot_type_id, artifact_path, label_order, active,"
                " training_set_id, sampling_method, created_at_ms, collect_percentage)"
                " VALUES (?, ?, ?, 0, ?, ?, ?, ?)",
                (plot_type_id, artifact_path, json.dumps(list(label_order)),
                 training_set_id, sampling_method, created, collect_percentage))
            self._conn.commit()
            return ModelRecord(cur.lastrowid, plot_type_id, artifact_path,
                               tuple(label_order), False, training_set_id,
                               sampling_method, created, collect_percentage)

    def _model_from_row(self, row):
        return ModelRecord(row[0], row[1], row[2], tuple(json.loads(row[3])),
                           bool(row[4]), row[5], row[6], row[7], row[8])

    _MODEL_COLS = ("model_id, plot_type_id, artifact_path, label_order, active,"
                   " training_set_id, sampling_method, created_at_ms, collect_percentage")

    def get_model(self, model_id):
        with self._lock:
            row = self._conn.execute(
                f"SELECT {self._MODEL_COLS} FROM models WHERE model_id = ?",
                (model_id,)).fetchone()
            if row is None:
                raise errors.UnknownModel(f"model {model_id}")
            return self._model_from_row(row)

    def list_models(self, plot_type_id):
        with self._lock:
            self.get_plot_type(plot_type_id)
            rows = self._conn.execute(
                f"SELECT {self._MODEL_COLS} FROM models WHERE plot_type_id = ?"
                " ORDER BY model_id", (plot_type_id,)).fetchall()
            return [self._model_from_row(r) for r in rows]

    def set_active_model(self, model_id):
        with self._lock:
            model = self.get_model(model_id)
            row = self._conn.execute(
                "SELECT model_id FROM models WHERE plot_type_id = ? AND active = 1",
                (model.plot_type_id,)).fetchone()
            previous = row[0] if row else None
            self._conn.execute(
                "UPDATE models SET active = 0 WHERE plot_type_id = ?",
                (model.plot_type_id,))
            self._conn.execute(
                "UPDATE models SET active = 1 WHERE model_id = ?", (model_id,))
            self._conn.commit()
            return previous

    def get_active_model(self, plot_type_id):
        with self._lock:
            self.get_plot_type(plot_type_id)
            row = self._conn.execute(
                f"SELECT {self._MODEL_COLS} FROM models"
                " WHERE plot_type_id = ? AND active = 1", (plot_type_id,)).fetchone()
            return self._model_from_row(row) if row else None

    def set_thresholds(self, model_id, thresholds):
        with self._lock:
            model = self.get_model(model_id)
            _validate_thresholds(model, thresholds)
            for label_id, value in thresholds.items():
                self._conn.execute(
                    "INSERT INTO thresholds (model_id, label_id, threshold)"
                    " VALUES (?, ?, ?) ON CONFLICT (model_id, label_id)"
                    " DO UPDATE SET threshold = excluded.threshold",
                    (model_id, label_id, float(value)))
            self._conn.commit()
            return [ThresholdConfig(model_id, lid, float(thresholds[lid]))
                    for lid in model.label_order]

    def get_thresholds(self, model_id):
        with self._lock:
            self.get_model(model_id)
            rows = self._conn.execute(
                "SELECT label_id, threshold FROM thresholds WHERE model_id = ?",
                (model_id,)).fetchall()
            return {r[0]: r[1] for r in rows}

    def create_training_set(self, plot_type_id, members, sampling_method="manual"):
        with self._lock:
            self.get_plot_type(plot_type_id)
            members = tuple((int(i), int(l)) for i, l in members)
            for image_id, label_id in members:
                current = self.current_label(image_id)
                if current is None or current.label_id != label_id:
                    raise errors.ValidationError(
                        f"image {image_id} is not currently labeled {label_id}")
            created = now_ms()
            cur = self._conn.execute(
                "INSERT INTO training_sets (plot_type_id, sampling_method, created_at_ms)"
                " VALUES (?, ?, ?)", (plot_type_id, sampling_method, created))
            ts_id = cur.lastrowid
            for pos, (image_id, label_id) in enumerate(members):
                self._conn.execute(
                    "INSERT INTO training_set_members (training_set_id, position,"
                    " image_id, label_id) VALUES (?, ?, ?, ?)",
                    (ts_id, pos, image_id, label_id))
            self._conn.commit()
            return TrainingSet(ts_id, plot_type_id, members, sampling_method, created)

    def get_training_set(self, training_set_id):
        with self._lock:
            row = self._conn.execute(
                "SELECT training_set_id, plot_type_id, sampling_method, created_at_ms"
                " FROM training_sets WHERE training_set_id = ?",
                (training_set_id,)).fetchone()
            if row is None:
                raise errors.UnknownEntityError(f"training set {training_set_id}")
            members = tuple(
                (r[0], r[1]) for r in self._conn.execute(
                    "SELECT image_id, label_id FROM training_set_members"
                    " WHERE training_set_id = ? ORDER BY position", (training_set_id,)))
            return TrainingSet(row[0], row[1], members, row[2], row[3])

    # -- labeling ----------------------------------------------------------------

    def assign_label(self, image_id, label_id, labeler, assigned_at=None):
        with self._lock:
            image = self.get_image(image_id)
            label = self.get_label(label_id)
            if label.plot_type_id != image.plot_type_id:
                raise errors.LabelPlotTypeMismatch(
                    f"label {label_id} does not belong to plot type {image.plot_type_id}")
            allowed = self._conn.execute(
                "SELECT 1 FROM allowed_labelers WHERE plot_type_id = ? AND user_id = ?",
                (image.plot_type_id, labeler)).fetchone()
            if allowed is None:
                raise errors.PermissionDenied(f"{labeler!r} may not label this plot type")
            self._conn.execute(
                "UPDATE label_assignments SET superseded = 1"
                " WHERE image_id = ? AND superseded = 0", (image_id,))
            at = assigned_at if assigned_at is not None else now_ms()
            cur = self._conn.execute(
                "INSERT INTO label_assignments (image_id, label_id, labeler,"
                " assigned_at_ms, superseded) VALUES (?, ?, ?, ?, 0)",
                (image_id, label_id, labeler, at))
            self._conn.commit()
            return LabelAssignment(cur.lastrowid, image_id, label_id, labeler, at, False)

    def current_label(self, image_id):
        with self._lock:
            row = self._conn.execute(
                "SELECT assignment_id, image_id, label_id, labeler, assigned_at_ms,"
                " superseded FROM label_assignments"
                " WHERE image_id = ? AND superseded = 0", (image_id,)).fetchone()
            return LabelAssignment(row[0], row[1], row[2], row[3], row[4],
                                   bool(row[5])) if row else None

    def label_history(self, image_id):
        with self._lock:
            rows = self._conn.execute(
                "SELECT assignment_id, image_id, label_id, labeler, assigned_at_ms,"
                " superseded FROM label_assignments WHERE image_id = ?"
                " ORDER BY assignment_id", (image_id,)).fetchall()
            return [LabelAssignment(r[0], r[1], r[2], r[3], r[4], bool(r[5]))
                    for r in rows]

    def query_labeled(self, plot_type_id, label_id=None, t_from=None, t_to=None):
        with self._lock:
            self.get_plot_type(plot_type_id)
            sql = ("SELECT i.image_id, i.plot_type_id, i.run_number, i.sequence,"
                   " i.capture_time_ms, i.storage_path, i.width, i.height,"
                   " a.assignment_id, a.image_id, a.label_id, a.labeler,"
                   " a.assigned_at_ms, a.superseded"
                   " FROM label_assignments a JOIN images i ON i.image_id = a.image_id"
                   " WHERE a.superseded = 0 AND i.plot_type_id = ?")
            params: list = [plot_type_id]
            if label_id is not None:
                sql += " AND a.label_id = ?"
                params.append(label_id)
            if t_from is not None:
                sql += " AND a.assigned_at_ms >= ?"
                params.append(t_from)
            if t_to is not None:
                sql += " AND a.assigned_at_ms <= ?"
                params.append(t_to)
            sql += " ORDER BY a.assigned_at_ms, a.assignment_id"
            out = []
            for r in self._conn.execute(sql, params):
                out.append((ImageRecord(*r[:8]),
                            LabelAssignment(r[8], r[9], r[10], r[11], r[12], bool(r[13]))))
            return out

    def query_unlabeled(self, plot_type_id, limit, t_from=None, t_to=None):
        if limit < 1:
            raise errors.InvalidLimit("limit must be >= 1")
        with self._lock:
            self.get_plot_type(plot_type_id)
            sql = ("SELECT i.image_id, i.plot_type_id, i.run_number, i.sequence,"
                   " i.capture_time_ms, i.storage_path, i.width, i.height"
                   " FROM labeling_queue q JOIN images i ON i.image_id = q.image_id"
                   " WHERE i.plot_type_id = ? AND NOT EXISTS (SELECT 1 FROM"
                   " label_assignments a WHERE a.image_id = i.image_id AND a.superseded = 0)")
            params: list = [plot_type_id]
            if t_from is not None:
                sql += " AND i.capture_time_ms >= ?"
                params.append(t_from)
            if t_to is not None:
                sql += " AND i.capture_time_ms <= ?"
                params.append(t_to)
            sql += " ORDER BY i.capture_time_ms, i.sequence, i.image_id LIMIT ?"
            params.append(limit)
            return [ImageRecord(*r) for r in self._conn.execute(sql, params)]

    def enqueue_for_labeling(self, image_id):
        with self._lock:
            self.get_image(image_id)
            self._conn.execute(
                "INSERT OR IGNORE INTO labeling_queue (image_id, enqueued_at_ms)"
                " VALUES (?, ?)", (image_id, now_ms()))
            self._conn.commit()

    # -- run history / runtime ------------------------------------------------------

    def record_inference(self, entry):
        with self._lock:
            self.get_image(entry.image_id)
            model = self.get_model(entry.model_id)
            weights = _validate_entry(entry, model)
            cur = self._conn.execute(
                "INSERT INTO run_history (image_id, model_id, output_weights,"
                " classification, confirmed, collected, collect_reason, stage_timings,"
                " inferred_at_ms) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (entry.image_id, entry.model_id, json.dumps(list(weights)),
                 entry.classification, int(entry.confirmed), int(entry.collected),
                 entry.collect_reason.value,
                 json.dumps(list(entry.stage_timings.items())), entry.inferred_at))
            self._conn.commit()
            return cur.lastrowid

    _HISTORY_COLS = ("inference_id, image_id, model_id, output_weights, classification,"
                     " confirmed, collected, collect_reason, stage_timings, inferred_at_ms")

    @staticmethod
    def _entry_from_row(row) -> RunHistoryEntry:
        return RunHistoryEntry(row[0], row[1], row[2], tuple(json.loads(row[3])),
                               row[4], bool(row[5]), bool(row[6]),
                               CollectReason(row[7]),
                               dict((k, v) for k, v in json.loads(row[8])), row[9])

    def get_inference(self, inference_id):
        with self._lock:
            row = self._conn.execute(
                f"SELECT {self._HISTORY_COLS} FROM run_history WHERE inference_id = ?",
                (inference_id,)).fetchone()
            if row is None:
                raise errors.UnknownEntityError(f"inference {inference_id}")
            return self._entry_from_row(row)

    def query_inferences(self, plot_type_id=None, model_id=None, image_id=None,
                         t_from=None, t_to=None):
        with self._lock:
            sql = (f"SELECT {', '.join('h.' + c.strip() for c in self._HISTORY_COLS.split(','))}"
                   " FROM run_history h JOIN images i ON i.image_id = h.image_id WHERE 1=1")
            params: list = []
            if plot_type_id is not None:
                sql += " AND i.plot_type_id = ?"
                params.append(plot_type_id)
            if model_id is not None:
                sql += " AND h.model_id = ?"
                params.append(model_id)
            if image_id is not None:
                sql += " AND h.image_id = ?"
                params.append(image_id)
            if t_from is not None:
                sql += " AND h.inferred_at_ms >= ?"
                params.append(t_from)
            if t_to is not None:
                sql += " AND h.inferred_at_ms <= ?"
                params.append(t_to)
            sql += " ORDER BY h.inferred_at_ms, h.inference_id"
            return [self._entry_from_row(r) for r in self._conn.execute(sql, params)]

    def claim_order(self, order_id):
        with self._lock:
            try:
                self._conn.execute(
                    "INSERT INTO claimed_orders (order_id) VALUES (?)", (order_id,))
            except sqlite3.IntegrityError:
                self._conn.rollback()
                return False
            self._conn.commit()
            return True

    def upsert_runtime(self, entry):
        with self._lock:
            self._conn.execute(
                "INSERT INTO runtime_entries (inference_id, plot_type_id, image_ref,"
                " gradcam_ref, classification, confirmed, inferred_at_ms)"
                " VALUES (?, ?, ?, ?, ?, ?, ?) ON CONFLICT (inference_id) DO UPDATE SET"
                " plot_type_id = excluded.plot_type_id, image_ref = excluded.image_ref,"
                " gradcam_ref = excluded.gradcam_ref, classification = excluded.classification,"
                " confirmed = excluded.confirmed, inferred_at_ms = excluded.inferred_at_ms",
                (entry.inference_id, entry.plot_type_id, entry.image_ref,
                 entry.gradcam_ref, entry.classification, int(entry.confirmed),
                 entry.inferred_at))
            window_ms = int(self.retention_window_s * 1000)
            self._conn.execute(
                "DELETE FROM runtime_entries WHERE inferred_at_ms <="
                " (SELECT MAX(inferred_at_ms) FROM runtime_entries) - ?", (window_ms,))
            self._conn.commit()
            return True

    def query_runtime(self, plot_type_id, now=None):
        now = now if now is not None else now_ms()
        window_ms = int(self.retention_window_s * 1000)
        with self._lock:
            rows = self._conn.execute(
                "SELECT inference_id, plot_type_id, image_ref, gradcam_ref,"
                " classification, confirmed, inferred_at_ms FROM runtime_entries"
                " WHERE plot_type_id = ? AND inferred_at_ms > ?"
                " ORDER BY inferred_at_ms, inference_id",
                (plot_type_id, now - window_ms)).fetchall()
            return [RunTimeEntry(r[0], r[1], r[2], r[3], r[4], bool(r[5]), r[6])
                    for r in rows]

    def query_weight_series(self, plot_type_id, t_from, t_to):
        if t_from > t_to:
            raise errors.ValidationError("window start after end")
        with self._lock:
            pt = self.get_plot_type(plot_type_id)
            label_names = {l.label_id: l.name for l in pt.labels}
            series: dict[str, list[tuple[int, float]]] = {}
            active = self.get_active_model(plot_type_id)
            if active is not None:
                for label_id in active.label_order:
                    series[label_names[label_id]] = []
            model_orders: dict[int, tuple[int, ...]] = {}
            for entry in self.query_inferences(plot_type_id=plot_type_id,
                                               t_from=t_from, t_to=t_to):
                if entry.model_id not in model_orders:
                    model_orders[entry.model_id] = self.get_model(entry.model_id).label_order
                for label_id, weight in zip(model_orders[entry.model_id],
                                            entry.output_weights):
                    name = label_names[label_id]
                    series.setdefault(name, []).append((entry.inferred_at, weight))
            return series

    # -- feeder bookkeeping ------------------------------------------------------------

    def mark_processed(self, filename):
        with self._lock:
            self._conn.execute(
                "INSERT OR IGNORE INTO processed_files (filename) VALUES (?)", (filename,))
            self._conn.commit()

    def is_processed(self, filename):
        with self._lock:
            return self._conn.execute(
                "SELECT 1 FROM processed_files WHERE filename = ?",
                (filename,)).fetchone() is not None
