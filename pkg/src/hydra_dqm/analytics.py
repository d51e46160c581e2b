"""Model and pipeline analytics over persisted data.

Everything here is a pure read of the store (plus image files), safe to
run concurrently with the live pipeline: the enhanced confusion matrix,
threshold selection by maximum effective F1, the training-diff report,
per-stage latency histograms and the daily log digest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import errors, imaging
from .classifier import ClassifierBackend, ReferenceClassifier, softmax
from .model import Severity, argmax_index
from .store import Store

# 24 log-spaced latency buckets from 1 microsecond to 100 seconds;
# out-of-range durations clamp into the end buckets.
HISTOGRAM_EDGES = np.logspace(-6.0, 2.0, 25)
DAY_MS = 24 * 3600 * 1000


@dataclass
class EcmCell:
    count: int = 0
    weight_samples: list[float] = field(default_factory=list)


@dataclass
class EnhancedConfusionMatrix:
    """Confusion counts plus, per cell, the predicted-label weights."""

    model_id: int
    label_order: tuple[int, ...]
    label_names: tuple[str, ...]
    cells: list[list[EcmCell]]  # [true][predicted]

    @property
    def total(self) -> int:
        return sum(c.count for row in self.cells for c in row)

    def counts(self) -> np.ndarray:
        return np.array([[c.count for c in row] for row in self.cells], dtype=np.int64)


@dataclass
class LatencyHistogram:
    stage: str
    bucket_edges: np.ndarray
    counts: np.ndarray
    window: tuple[int, int]


@dataclass
class LogDigestEntry:
    inference_id: int
    image_id: int
    classification: int
    classification_name: str
    confirmed: bool
    inferred_at: int
    heatmap_ref: str | None


@dataclass
class LogDigest:
    window: tuple[int, int]
    entries: list[LogDigestEntry]


def _score_evaluation_set(store: Store, image_root: str | Path, model_id: int,
                          evaluation_set,
                          backend_cls: type[ClassifierBackend] = ReferenceClassifier):
    """Run the model over (image_id, true_label_id) pairs.

    Returns (model, plot type, list of (weights, true_index)) with
    indices into the model's label_order.
    """
    model = store.get_model(model_id)
    pt = store.get_plot_type(model.plot_type_id)
    backend = backend_cls.load(model.artifact_path)
    order = list(model.label_order)
    scored = []
    for image_id, true_label in evaluation_set:
        if true_label is None:
            raise errors.UnlabeledImage(f"image {image_id} has no label")
        if true_label not in model.label_order:
            raise errors.UnlabeledImage(
                f"label {true_label} not in model {model_id} label set")
        rec = store.get_image(image_id)
        payload = imaging.load_payload(Path(image_root) / rec.storage_path,
                                       pt.channels, pt.input_width, pt.input_height)
        weights = softmax(backend.infer(np.asarray(payload, dtype=np.float64)).logits)
        scored.append((image_id, weights, order.index(true_label)))
    return model, pt, scored


def labeled_evaluation_set(store: Store, plot_type_id: int) -> list[tuple[int, int]]:
    """(image_id, current label) pairs for every labeled image of a plot type."""
    return [(image.image_id, assignment.label_id)
            for image, assignment in store.query_labeled(plot_type_id)]


def build_ecm(store: Store, image_root: str | Path, model_id: int, evaluation_set,
              backend_cls: type[ClassifierBackend] = ReferenceClassifier
              ) -> EnhancedConfusionMatrix:
    """Confusion matrix with the per-cell distribution of argmax weights."""
    if not evaluation_set:
        raise errors.EmptyEvaluationSet("evaluation set is empty")
    model, pt, scored = _score_evaluation_set(store, image_root, model_id,
                                              evaluation_set, backend_cls)
    n = len(model.label_order)
    cells = [[EcmCell() for _ in range(n)] for _ in range(n)]
    for _, weights, true_index in scored:
        pred = argmax_index(weights)
        cells[true_index][pred].count += 1
        cells[true_index][pred].weight_samples.append(float(weights[pred]))
    names = tuple(pt.label_by_id(lid).name for lid in model.label_order)
    return EnhancedConfusionMatrix(model_id, model.label_order, names, cells)


def effective_f1(weights_and_truths, label: int, threshold: float) -> float:
    """Threshold-aware F1 for one label index.

    A sample counts as predicted-L only when L is the argmax AND its
    weight is strictly above the threshold; unconfirmed argmax-L samples
    with true label L count as false negatives, so raising the threshold
    trades false positives for false negatives.
    """
    tp = fp = fn = 0
    for weights, true_label in weights_and_truths:
        predicted = argmax_index(weights) == label and float(weights[label]) > threshold
        if predicted and true_label == label:
            tp += 1
        elif predicted and true_label != label:
            fp += 1
        elif not predicted and true_label == label:
            fn += 1
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def select_thresholds_from_scores(weights_and_truths, n_labels: int
                                  ) -> tuple[list[float], list[float]]:
    """Per-label threshold maximizing effective F1 (lowest wins ties).

    Candidates are 0 plus the observed argmax weights for the label; F1
    is piecewise-constant between observed weights, so this finite sweep
    is exact.  Returns (thresholds, achieved F1 scores).
    """
    thresholds, scores = [], []
    for label in range(n_labels):
        candidates = {0.0}
        for weights, _ in weights_and_truths:
            if argmax_index(weights) == label:
                candidates.add(float(weights[label]))
        best_t, best_f1 = 0.0, -1.0
        for t in sorted(candidates):
            f1 = effective_f1(weights_and_truths, label, t)
            if f1 > best_f1:
                best_t, best_f1 = t, f1
        thresholds.append(best_t)
        scores.append(best_f1)
    return thresholds, scores


def select_default_thresholds(store: Store, image_root: str | Path, model_id: int,
                              evaluation_set,
                              backend_cls: type[ClassifierBackend] = ReferenceClassifier
                              ) -> dict[int, float]:
    """Sweep, persist and return per-label confirmation thresholds."""
    if not evaluation_set:
        raise errors.EmptyEvaluationSet("evaluation set is empty")
    model, _, scored = _score_evaluation_set(store, image_root, model_id,
                                             evaluation_set, backend_cls)
    pairs = [(weights, true_index) for _, weights, true_index in scored]
    present = {t for _, t in pairs}
    if present != set(range(len(model.label_order))):
        raise errors.EmptyEvaluationSet(
            "evaluation set must contain every label at least once")
    thresholds, _ = select_thresholds_from_scores(pairs, len(model.label_order))
    mapping = {label_id: thresholds[i] for i, label_id in enumerate(model.label_order)}
    store.set_thresholds(model_id, mapping)
    return mapping


@dataclass
class Disagreement:
    image_id: int
    human_label: int
    model_label: int
    model_weights: tuple[float, ...]

    @property
    def model_weight(self) -> float:
        return max(self.model_weights)


def training_diff(store: Store, image_root: str | Path, model_id: int, labeled_set,
                  backend_cls: type[ClassifierBackend] = ReferenceClassifier
                  ) -> list[Disagreement]:
    """Images where the model and the human disagree, most confident first."""
    model, _, scored = _score_evaluation_set(store, image_root, model_id,
                                             labeled_set, backend_cls)
    out = []
    for image_id, weights, true_index in scored:
        pred = argmax_index(weights)
        if pred != true_index:
            out.append(Disagreement(image_id, model.label_order[true_index],
                                    model.label_order[pred],
                                    tuple(float(w) for w in weights)))
    out.sort(key=lambda d: (-d.model_weight, d.image_id))
    return out


def status_metrics(store: Store, t_from: int, t_to: int
                   ) -> tuple[dict[str, LatencyHistogram], dict[str, list[tuple[int, float]]]]:
    """Per-stage latency histograms and per-run-number average stage times."""
    if t_from > t_to:
        raise errors.ValidationError("window start after end")
    entries = store.query_inferences(t_from=t_from, t_to=t_to)
    histograms: dict[str, np.ndarray] = {}
    per_run_acc: dict[str, dict[int, list[float]]] = {}
    run_numbers: dict[int, int] = {}
    for entry in entries:
        run = run_numbers.get(entry.image_id)
        if run is None:
            run = store.get_image(entry.image_id).run_number
            run_numbers[entry.image_id] = run
        for stage, seconds in entry.stage_timings.items():
            counts = histograms.setdefault(stage, np.zeros(len(HISTOGRAM_EDGES) - 1,
                                                           dtype=np.int64))
            bucket = int(np.searchsorted(HISTOGRAM_EDGES, seconds, side="right")) - 1
            counts[min(max(bucket, 0), len(counts) - 1)] += 1
            per_run_acc.setdefault(stage, {}).setdefault(run, []).append(seconds)
    hist = {stage: LatencyHistogram(stage, HISTOGRAM_EDGES.copy(), counts,
                                    (t_from, t_to))
            for stage, counts in sorted(histograms.items())}
    per_run = {stage: [(run, float(np.mean(vals)))
                       for run, vals in sorted(groups.items())]
               for stage, groups in sorted(per_run_acc.items())}
    return hist, per_run


def build_log_digest(store: Store, t_from: int, t_to: int,
                     heatmap_dir: str | Path | None = None) -> LogDigest:
    """Confirmed-Bad and unconfirmed inferences in the window, newest first."""
    if t_from > t_to:
        raise errors.ValidationError("window start after end")
    entries = []
    label_severity: dict[int, Severity] = {}
    label_names: dict[int, str] = {}
    for entry in store.query_inferences(t_from=t_from, t_to=t_to):
        severity = label_severity.get(entry.classification)
        if severity is None:
            label = store.get_label(entry.classification)
            severity = label.severity
            label_severity[entry.classification] = severity
            label_names[entry.classification] = label.name
        if not ((entry.confirmed and severity is Severity.BAD) or not entry.confirmed):
            continue
        heatmap_ref = None
        if heatmap_dir is not None:
            candidate = Path(heatmap_dir) / f"heatmap_{entry.inference_id}.pgm"
            if candidate.exists():
                heatmap_ref = str(candidate)
        entries.append(LogDigestEntry(entry.inference_id, entry.image_id,
                                      entry.classification,
                                      label_names[entry.classification],
                                      entry.confirmed, entry.inferred_at, heatmap_ref))
    entries.sort(key=lambda e: (-e.inferred_at, -e.inference_id))
    return LogDigest((t_from, t_to), entries)
