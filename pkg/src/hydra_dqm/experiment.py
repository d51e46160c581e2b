"""Desk-scale end-to-end experiments over the full pipeline.

Builds everything from one config: generates a labeled training stream,
trains the reference model, selects confirmation thresholds, then runs
feeder -> balancer -> N predict workers -> keeper over a fresh stream
with a scheduled failure and reports detection latency, confusion
against ground truth, collection statistics and per-stage latency.
"""

from __future__ import annotations

import json
import shutil
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analytics import select_default_thresholds
from .balancer import LoadBalancer
from .classifier import (
    ReferenceClassifier,
    evaluate_accuracy,
    load_training_images,
    train_reference,
)
from .feeder import Feeder
from .keeper import Keeper
from .model import CollectReason, Severity
from .naming import parse_filename
from .simulate import FailureEvent, FailureKind, FailureSchedule, generate_stream
from .store import MemoryStore, SqliteStore, Store
from .transport import Channel
from .worker import PredictWorker

TRAIN_RUN_NUMBER = 9000
STREAM_RUN_NUMBER = 1001


@dataclass
class ExperimentConfig:
    workdir: str
    plot_type: str = "occupancy"
    width: int = 32
    height: int = 32
    channels: int = 1
    n_train_good: int = 100
    n_train_bad: int = 100
    n_stream_frames: int = 300
    failure_onset: int = 150
    failure_kind: str = "DeadRegion"
    region: tuple[int, int, int, int] = (8, 8, 12, 12)
    flicker_period: int = 4
    epochs: int = 300
    learning_rate: float = 0.5
    n_kernels: int = 8
    train_seed: int = 7
    train_stream_seed: int = 5
    stream_seed: int = 11
    keeper_seed: int = 123
    n_workers: int = 2
    collect_percentage: float = 0.1
    db: str = "memory"  # "memory" or a sqlite file path
    poll_ms: int = 20
    timeout_s: float = 60.0

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        if "region" in data:
            data["region"] = tuple(data["region"])
        return cls(**data)


@dataclass
class Pipeline:
    """Feeder, balancer, N workers and keeper wired over channels."""

    store: Store
    image_root: Path
    heatmap_dir: Path
    n_workers: int
    keeper_seed: int
    input_dir: Path | None = None
    reject_dir: Path | None = None
    poll_interval_s: float = 0.02
    dead_letter_dir: Path | None = None

    def __post_init__(self):
        self.balancer = LoadBalancer()
        self.report_channel = Channel(1024)
        self.workers = []
        for i in range(self.n_workers):
            worker = PredictWorker(self.store, self.report_channel,
                                   name=f"worker-{i}",
                                   dead_letter_dir=self.dead_letter_dir)
            self.balancer.register_worker(worker.name, worker.buffer)
            self.workers.append(worker)
        self.keeper = Keeper(self.store, self.report_channel, self.heatmap_dir,
                             rng_seed=self.keeper_seed,
                             dead_letter_dir=self.dead_letter_dir)
        self.feeder = None
        if self.input_dir is not None:
            self.feeder = Feeder(self.store, self.input_dir, self.image_root,
                                 self.reject_dir, out=self.balancer.inbound,
                                 poll_interval_s=self.poll_interval_s)
        self._stop_feeder = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        if self.feeder is not None:
            self._threads.append(threading.Thread(
                target=self.feeder.run, args=(self._stop_feeder,), name="feeder"))
        self._balancer_thread = threading.Thread(target=self.balancer.run,
                                                 name="balancer")
        self._threads.append(self._balancer_thread)
        for worker in self.workers:
            self._threads.append(threading.Thread(target=worker.run, name=worker.name))
        self._keeper_thread = threading.Thread(target=self.keeper.run, name="keeper")
        self._threads.append(self._keeper_thread)
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        """Drain in stage order: feeder, balancer, workers, keeper."""
        self._stop_feeder.set()
        for t in self._threads:
            if t.name == "feeder":
                t.join()
        self.balancer.inbound.close()
        for t in self._threads:
            if t.name == "balancer":
                t.join()
        for t in self._threads:
            if t.name.startswith("worker-"):
                t.join()
        self.report_channel.close()
        self._keeper_thread.join()


def _make_store(config: ExperimentConfig) -> Store:
    if config.db == "memory":
        return MemoryStore()
    return SqliteStore(config.db)


def _schedule(config: ExperimentConfig, start: int, end: int) -> FailureSchedule:
    event = FailureEvent(start, end, FailureKind(config.failure_kind),
                         config.region, config.flicker_period)
    return FailureSchedule((event,))


def _register_and_label(store: Store, pt, stream, image_root: Path,
                        labeler: str) -> list[tuple[int, int]]:
    """Move generated training frames under the image root, register and
    label them per ground truth."""
    label_ids = {lab.name: lab.label_id for lab in pt.labels}
    dest = image_root / pt.name
    dest.mkdir(parents=True, exist_ok=True)
    members = []
    for item in stream.truth:
        name = item["filename"]
        fields = parse_filename(name)
        src = stream.directory / name
        shutil.move(str(src), str(dest / name))
        rec = store.register_image(pt.plot_type_id, fields.run_number,
                                   fields.sequence, fields.capture_time_ms,
                                   f"{pt.name}/{name}", pt.input_width,
                                   pt.input_height)
        store.assign_label(rec.image_id, label_ids[item["label"]], labeler)
        members.append((rec.image_id, label_ids[item["label"]]))
    return members


def run_experiment(config: ExperimentConfig) -> dict:
    """Train, select thresholds, stream with a scheduled failure, report."""
    t_start = time.perf_counter()
    workdir = Path(config.workdir)
    dirs = {name: workdir / name
            for name in ("input", "images", "heatmaps", "rejects", "artifacts",
                         "dead_letters", "train_frames")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)

    store = _make_store(config)
    pt = store.register_plot_type(config.plot_type, config.width, config.height,
                                  config.channels,
                                  [("Good", (0, 200, 0), Severity.GOOD),
                                   ("Bad", (220, 0, 0), Severity.BAD)],
                                  allowed_labelers=["trainer"])
    severity_by_id = {lab.label_id: lab.severity for lab in pt.labels}
    name_by_id = {lab.label_id: lab.name for lab in pt.labels}

    # -- train ---------------------------------------------------------
    n_train = config.n_train_good + config.n_train_bad
    train_stream = generate_stream(
        pt.name, config.height, config.width, config.channels, n_train,
        _schedule(config, config.n_train_good, n_train - 1),
        config.train_stream_seed, dirs["train_frames"],
        run_number=TRAIN_RUN_NUMBER)
    members = _register_and_label(store, pt, train_stream, dirs["images"], "trainer")
    training_set = store.create_training_set(pt.plot_type_id, members,
                                             sampling_method="simulated")
    artifact = dirs["artifacts"] / "model.bin"
    model = train_reference(store, dirs["images"], training_set, config.epochs,
                            config.learning_rate, config.train_seed, artifact,
                            n_kernels=config.n_kernels,
                            sampling_method="simulated",
                            collect_percentage=config.collect_percentage)
    store.set_active_model(model.model_id)
    images, targets, _ = load_training_images(store, dirs["images"], training_set)
    train_accuracy = evaluate_accuracy(ReferenceClassifier.load(artifact),
                                       images, targets)
    thresholds = select_default_thresholds(store, dirs["images"], model.model_id,
                                           training_set.members)

    # -- stream ----------------------------------------------------------
    stream_schedule = (FailureSchedule(())
                       if config.failure_onset >= config.n_stream_frames
                       else _schedule(config, config.failure_onset,
                                      config.n_stream_frames - 1))
    generate_stream(pt.name, config.height, config.width, config.channels,
                    config.n_stream_frames, stream_schedule,
                    config.stream_seed, dirs["input"],
                    run_number=STREAM_RUN_NUMBER)
    truth_by_seq = {i: "Bad" if config.failure_onset <= i else "Good"
                    for i in range(config.n_stream_frames)}

    pipeline = Pipeline(store, dirs["images"], dirs["heatmaps"],
                        config.n_workers, config.keeper_seed,
                        input_dir=dirs["input"], reject_dir=dirs["rejects"],
                        poll_interval_s=config.poll_ms / 1000.0,
                        dead_letter_dir=dirs["dead_letters"])
    pipeline.start()
    deadline = time.monotonic() + config.timeout_s
    while time.monotonic() < deadline:
        done = len(store.query_inferences(plot_type_id=pt.plot_type_id))
        if done >= config.n_stream_frames:
            break
        time.sleep(0.05)
    pipeline.stop()

    # -- gather ------------------------------------------------------------
    rows = []
    stage_timings: dict[str, list[float]] = {}
    for entry in store.query_inferences(plot_type_id=pt.plot_type_id):
        image = store.get_image(entry.image_id)
        if image.run_number != STREAM_RUN_NUMBER:
            continue
        rows.append({
            "sequence": image.sequence,
            "image_id": entry.image_id,
            "classification": name_by_id[entry.classification],
            "confirmed": entry.confirmed,
            "collect_reason": entry.collect_reason.value,
        })
        for stage, seconds in entry.stage_timings.items():
            stage_timings.setdefault(stage, []).append(seconds)
    rows.sort(key=lambda r: r["sequence"])

    severity_by_name = {name_by_id[lid]: sev for lid, sev in severity_by_id.items()}
    confirmed_bad = [r["sequence"] for r in rows
                     if r["confirmed"]
                     and severity_by_name[r["classification"]] is Severity.BAD]
    first_detection = min(confirmed_bad) if confirmed_bad else None
    confusion: dict[str, int] = {}
    for r in rows:
        key = f"{truth_by_seq[r['sequence']]}->{r['classification']}"
        confusion[key] = confusion.get(key, 0) + 1
    reasons: dict[str, int] = {}
    for r in rows:
        reasons[r["collect_reason"]] = reasons.get(r["collect_reason"], 0) + 1
    stages = {stage: {"count": len(vals),
                      "mean_s": float(np.mean(vals)),
                      "median_s": float(np.median(vals))}
              for stage, vals in sorted(stage_timings.items())}

    report = {
        "plot_type": pt.name,
        "model_id": model.model_id,
        "train_accuracy": train_accuracy,
        "thresholds": {name_by_id[k]: v for k, v in thresholds.items()},
        "n_stream_frames": config.n_stream_frames,
        "n_inferred": len(rows),
        "failure_onset": config.failure_onset,
        "first_confirmed_bad_sequence": first_detection,
        "detection_latency_frames": (None if first_detection is None
                                     else first_detection - config.failure_onset),
        "confirmed_bad_before_onset": sum(1 for s in confirmed_bad
                                          if s < config.failure_onset),
        "confusion": dict(sorted(confusion.items())),
        "collect_reasons": dict(sorted(reasons.items())),
        "stage_latency": stages,
        "balancer_median_seconds": stages.get("balancer", {}).get("median_s"),
        "worker_dead_letters": sum(len(w.dead_letters) for w in pipeline.workers),
        "keeper_duplicates": pipeline.keeper.duplicates,
        "elapsed_seconds": time.perf_counter() - t_start,
        "rows": rows,
    }
    (workdir / "experiment_report.json").write_text(json.dumps(report, indent=1))
    if isinstance(store, SqliteStore):
        store.close()
    return report
