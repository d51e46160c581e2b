"""Persistent entities and pipeline messages.

Conventions used across the package: timestamps are UTC milliseconds
(int), durations are seconds (float), image payloads are float32 arrays
of shape (height, width, channels) with values in [0, 1].
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import MalformedWeights

WEIGHT_SUM_TOL = 1e-9


def now_ms() -> int:
    """Current UTC time in milliseconds."""
    return time.time_ns() // 1_000_000


class Severity(str, Enum):
    GOOD = "Good"
    BAD = "Bad"
    OTHER = "Other"


class CollectReason(str, Enum):
    BAD_CLASS = "BadClass"
    UNCONFIRMED = "Unconfirmed"
    RANDOM_SAMPLE = "RandomSample"
    NONE = "None"


class AlarmKind(str, Enum):
    CONFIRMED_BAD = "ConfirmedBad"
    UNCONFIRMED = "Unconfirmed"


@dataclass(frozen=True)
class LabelDef:
    label_id: int
    plot_type_id: int
    name: str
    color: tuple[int, int, int]
    severity: Severity


@dataclass(frozen=True)
class PlotType:
    plot_type_id: int
    name: str
    input_width: int
    input_height: int
    channels: int
    allowed_labelers: frozenset[str]
    labels: tuple[LabelDef, ...]

    def label_by_id(self, label_id: int) -> LabelDef:
        for lab in self.labels:
            if lab.label_id == label_id:
                return lab
        raise KeyError(label_id)


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    plot_type_id: int
    run_number: int
    sequence: int
    capture_time: int
    storage_path: str
    width: int
    height: int


@dataclass(frozen=True)
class LabelAssignment:
    assignment_id: int
    image_id: int
    label_id: int
    labeler: str
    assigned_at: int
    superseded: bool


@dataclass(frozen=True)
class ModelRecord:
    model_id: int
    plot_type_id: int
    artifact_path: str
    label_order: tuple[int, ...]
    active: bool
    training_set_id: int | None
    sampling_method: str
    created_at: int
    # per-model collection configuration read by the keeper
    collect_percentage: float = 0.0


@dataclass(frozen=True)
class ThresholdConfig:
    model_id: int
    label_id: int
    threshold: float


@dataclass(frozen=True)
class TrainingSet:
    training_set_id: int
    plot_type_id: int
    members: tuple[tuple[int, int], ...]  # (image_id, label_id)
    sampling_method: str
    created_at: int


@dataclass(frozen=True)
class RunHistoryEntry:
    inference_id: int
    image_id: int
    model_id: int
    output_weights: tuple[float, ...]
    classification: int  # label_id at argmax (first index on tie)
    confirmed: bool
    collected: bool
    collect_reason: CollectReason
    stage_timings: dict[str, float]
    inferred_at: int


@dataclass(frozen=True)
class RunTimeEntry:
    inference_id: int
    plot_type_id: int
    image_ref: str
    gradcam_ref: str | None
    classification: int
    confirmed: bool
    inferred_at: int


@dataclass(frozen=True)
class AlarmEvent:
    inference_id: int
    plot_type_id: int
    kind: AlarmKind
    raised_at: int


@dataclass
class InferenceOrder:
    """Feeder -> balancer -> worker message carrying one resized image."""

    order_id: int
    image_id: int
    plot_type_id: int
    payload: np.ndarray  # float32, (height, width, channels)
    stage_timings: dict[str, float]
    created_at: int


@dataclass
class Report:
    """Worker -> keeper message carrying one inference result."""

    order_id: int
    image_id: int
    model_id: int
    output_weights: np.ndarray  # float64, length = |label_order|
    classification: int  # label_id
    gradcam: np.ndarray | None  # float32, model input spatial shape
    stage_timings: dict[str, float]
    inferred_at: int


def validate_weights(weights, n_labels: int) -> tuple[float, ...]:
    """Check an output-weight vector: length, range and unit sum."""
    w = tuple(float(x) for x in weights)
    if len(w) != n_labels:
        raise MalformedWeights(f"expected {n_labels} weights, got {len(w)}")
    if any(x < 0.0 or x > 1.0 for x in w):
        raise MalformedWeights("weights outside [0, 1]")
    if abs(sum(w) - 1.0) > WEIGHT_SUM_TOL:
        raise MalformedWeights(f"weights sum to {sum(w)!r}, not 1")
    return w


def argmax_index(weights) -> int:
    """Index of the largest weight; the smallest index wins exact ties."""
    return int(np.argmax(np.asarray(weights)))
