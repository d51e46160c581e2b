"""Synthetic detector-plot streams with injected failures.

Good frames are a smooth 2-D Gaussian bump plus seeded per-pixel noise;
scheduled failures corrupt a rectangular region (zeroed, saturated, or
flickering dead at a fixed period).  Frames are written as image files
under the ingest naming convention together with a ground-truth log, so
a generated directory can be fed straight into the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import InvalidSchedule
from .imaging import write_pnm
from .naming import FileNameFields, format_filename

NOISE_SIGMA = 0.05


class FailureKind(str, Enum):
    DEAD_REGION = "DeadRegion"
    HOT_SPOT = "HotSpot"
    FLICKER = "Flicker"


@dataclass(frozen=True)
class FailureEvent:
    start_index: int
    end_index: int  # inclusive
    kind: FailureKind
    region: tuple[int, int, int, int]  # (x, y, width, height)
    period: int = 0  # Flicker only, full cycle length in frames


@dataclass(frozen=True)
class FailureSchedule:
    events: tuple[FailureEvent, ...] = ()

    def validate(self) -> None:
        for ev in self.events:
            if ev.start_index < 0 or ev.end_index < 0:
                raise InvalidSchedule("negative frame index")
            if ev.start_index > ev.end_index:
                raise InvalidSchedule(f"start {ev.start_index} after end {ev.end_index}")
            x, y, w, h = ev.region
            if w < 1 or h < 1 or x < 0 or y < 0:
                raise InvalidSchedule(f"invalid region {ev.region}")
            if ev.kind is FailureKind.FLICKER and ev.period < 2:
                raise InvalidSchedule("Flicker period must be >= 2 frames")

    @classmethod
    def from_dict(cls, data: dict) -> "FailureSchedule":
        events = tuple(
            FailureEvent(int(e["start"]), int(e["end"]), FailureKind(e["kind"]),
                         tuple(int(v) for v in e["region"]), int(e.get("period", 0)))
            for e in data.get("events", []))
        schedule = cls(events)
        schedule.validate()
        return schedule


def base_pattern(height: int, width: int, channels: int) -> np.ndarray:
    """Smooth Gaussian occupancy-style bump in [0.1, 0.9]."""
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    sigma = max(min(height, width) / 4.0, 1.0)
    bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
    return np.repeat((0.1 + 0.8 * bump)[:, :, None], channels, axis=2)


def _region_dead_this_frame(event: FailureEvent, frame: int) -> bool:
    if not (event.start_index <= frame <= event.end_index):
        return False
    if event.kind is FailureKind.FLICKER:
        return (frame - event.start_index) % event.period < event.period // 2
    return True


@dataclass
class GeneratedStream:
    directory: Path
    filenames: list[str]
    truth: list[dict]  # {"sequence", "filename", "label"}

    def truth_labels(self) -> list[str]:
        return [t["label"] for t in self.truth]


def generate_stream(plot_type_name: str, height: int, width: int, channels: int,
                    n_frames: int, schedule: FailureSchedule, seed: int,
                    out_dir: str | Path, run_number: int = 1,
                    base_time_ms: int = 1_700_000_000_000,
                    interval_ms: int = 1000,
                    truth_path: str | Path | None = None) -> GeneratedStream:
    """Write ``n_frames`` image files plus a ground-truth log; deterministic
    in ``seed``."""
    if n_frames < 1:
        raise InvalidSchedule("n_frames must be >= 1")
    schedule.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    base = base_pattern(height, width, channels)
    filenames, truth = [], []
    for i in range(n_frames):
        img = np.clip(base + rng.normal(0.0, NOISE_SIGMA, base.shape), 0.0, 1.0)
        bad = False
        for ev in schedule.events:
            if not _region_dead_this_frame(ev, i):
                continue
            x, y, w, h = ev.region
            value = 1.0 if ev.kind is FailureKind.HOT_SPOT else 0.0
            img[y:y + h, x:x + w, :] = value
            bad = True
        name = format_filename(FileNameFields(plot_type_name, run_number, i,
                                              base_time_ms + i * interval_ms,
                                              "pgm" if channels == 1 else "ppm"))
        write_pnm(out / name, img)
        filenames.append(name)
        truth.append({"sequence": i, "filename": name,
                      "label": "Bad" if bad else "Good"})
    if truth_path is not None:
        Path(truth_path).write_text(json.dumps(truth, indent=1))
    return GeneratedStream(out, filenames, truth)
