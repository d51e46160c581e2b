"""HTTP surface over the store, analytics and the alarm stream.

Every endpoint is a thin JSON adapter around an operation defined
elsewhere; errors map to machine-readable codes (PermissionDenied,
UnknownEntity, Validation).  See docs/api.md for the endpoint list and
payload schemas.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Header, Query, Request
from fastapi.responses import FileResponse, JSONResponse

from . import analytics, errors
from .keeper import AlarmBus
from .model import now_ms
from .store import Store

MEDIA_TYPES = {".png": "image/png", ".pgm": "image/x-portable-graymap",
               ".ppm": "image/x-portable-pixmap"}

DAY_MS_DEFAULT = analytics.DAY_MS


@dataclass
class ApiConfig:
    image_root: str
    heatmap_dir: str
    listen: str = "127.0.0.1:8080"
    static_dir: str | None = None
    run_poll_ms: int = 2000
    status_poll_ms: int = 30000


def _status_for(exc: errors.HydraError) -> int:
    if isinstance(exc, errors.PermissionDenied):
        return 403
    if isinstance(exc, errors.UnknownEntityError):
        return 404
    if isinstance(exc, errors.ValidationError):
        return 400
    return 500


def _label_json(label) -> dict:
    return {"label_id": label.label_id, "plot_type_id": label.plot_type_id,
            "name": label.name, "color": list(label.color),
            "severity": label.severity.value}


def _image_json(image) -> dict:
    return {"image_id": image.image_id, "plot_type_id": image.plot_type_id,
            "run_number": image.run_number, "sequence": image.sequence,
            "capture_time": image.capture_time, "storage_path": image.storage_path,
            "width": image.width, "height": image.height}


def create_app(store: Store, config: ApiConfig,
               alarm_bus: AlarmBus | None = None) -> FastAPI:
    app = FastAPI(title="hydra-dqm", docs_url=None, redoc_url=None)
    bus = alarm_bus if alarm_bus is not None else AlarmBus()
    image_root = Path(config.image_root)
    heatmap_dir = Path(config.heatmap_dir)
    if not image_root.is_dir():
        raise errors.ValidationError(f"image root {image_root} does not exist")
    if config.static_dir and not Path(config.static_dir).is_dir():
        raise errors.ValidationError(f"static dir {config.static_dir} does not exist")
    heatmap_dir.mkdir(parents=True, exist_ok=True)

    @app.exception_handler(errors.HydraError)
    async def _hydra_error(_request: Request, exc: errors.HydraError):
        return JSONResponse(status_code=_status_for(exc),
                            content={"error": exc.code, "detail": str(exc)})

    @app.get("/config")
    def get_config():
        return {"run_poll_ms": config.run_poll_ms,
                "status_poll_ms": config.status_poll_ms}

    @app.get("/plot-types")
    def plot_types():
        return [{"plot_type_id": pt.plot_type_id, "name": pt.name,
                 "input_width": pt.input_width, "input_height": pt.input_height,
                 "channels": pt.channels,
                 "allowed_labelers": sorted(pt.allowed_labelers),
                 "labels": [_label_json(l) for l in pt.labels]}
                for pt in store.list_plot_types()]

    @app.get("/labels")
    def labels(plot_type: int):
        return [_label_json(l) for l in store.get_plot_type(plot_type).labels]

    @app.get("/unlabeled")
    def unlabeled(plot_type: int, limit: int = 100):
        return [_image_json(i) for i in store.query_unlabeled(plot_type, limit)]

    @app.post("/labels")
    def post_label(body: dict):
        for key in ("image_id", "label_id", "user"):
            if key not in body:
                raise errors.ValidationError(f"missing field {key!r}")
        a = store.assign_label(int(body["image_id"]), int(body["label_id"]),
                               str(body["user"]))
        return {"assignment_id": a.assignment_id, "image_id": a.image_id,
                "label_id": a.label_id, "labeler": a.labeler,
                "assigned_at": a.assigned_at}

    @app.get("/labeled")
    def labeled(plot_type: int, label: int | None = None,
                t_from: int | None = Query(default=None, alias="from"),
                t_to: int | None = Query(default=None, alias="to")):
        out = []
        for image, assignment in store.query_labeled(plot_type, label, t_from, t_to):
            row = _image_json(image)
            row["label_id"] = assignment.label_id
            row["labeler"] = assignment.labeler
            row["assigned_at"] = assignment.assigned_at
            out.append(row)
        return out

    @app.get("/models")
    def models(plot_type: int):
        return [{"model_id": m.model_id, "plot_type_id": m.plot_type_id,
                 "artifact_path": m.artifact_path,
                 "label_order": list(m.label_order), "active": m.active,
                 "training_set_id": m.training_set_id,
                 "sampling_method": m.sampling_method, "created_at": m.created_at,
                 "collect_percentage": m.collect_percentage,
                 "thresholds": store.get_thresholds(m.model_id)}
                for m in store.list_models(plot_type)]

    @app.post("/models/{model_id}/activate")
    def activate(model_id: int):
        previous = store.set_active_model(model_id)
        return {"model_id": model_id, "previous_active": previous}

    @app.get("/models/{model_id}/ecm")
    def ecm(model_id: int):
        model = store.get_model(model_id)
        evaluation = analytics.labeled_evaluation_set(store, model.plot_type_id)
        if not evaluation:
            return {"model_id": model_id, "labels": [], "cells": [], "total": 0}
        matrix = analytics.build_ecm(store, image_root, model_id, evaluation)
        return {"model_id": model_id,
                "labels": list(matrix.label_names),
                "label_order": list(matrix.label_order),
                "total": matrix.total,
                "cells": [[{"count": c.count, "weight_samples": c.weight_samples}
                           for c in row] for row in matrix.cells]}

    @app.put("/models/{model_id}/thresholds")
    def put_thresholds(model_id: int, body: dict,
                       x_user: str | None = Header(default=None)):
        model = store.get_model(model_id)
        pt = store.get_plot_type(model.plot_type_id)
        if x_user is None or x_user not in pt.allowed_labelers:
            raise errors.PermissionDenied(f"user {x_user!r} may not edit thresholds")
        updates = body.get("thresholds")
        if not isinstance(updates, dict):
            raise errors.ValidationError("body must carry a thresholds object")
        merged = store.get_thresholds(model_id)
        for key, value in updates.items():
            if not isinstance(value, (int, float)) or not (0.0 <= float(value) <= 1.0):
                raise errors.ValidationError(f"threshold {value!r} outside [0, 1]")
            merged[int(key)] = float(value)
        store.set_thresholds(model_id, merged)
        return {"model_id": model_id, "thresholds": store.get_thresholds(model_id)}

    @app.get("/run/live")
    def run_live(plot_type: int):
        return [{"inference_id": e.inference_id, "image_ref": e.image_ref,
                 "gradcam_ref": e.gradcam_ref,
                 "heatmap_available": e.gradcam_ref is not None,
                 "classification": e.classification,
                 "classification_name": store.get_label(e.classification).name,
                 "severity": store.get_label(e.classification).severity.value,
                 "confirmed": e.confirmed, "inferred_at": e.inferred_at}
                for e in store.query_runtime(plot_type)]

    @app.get("/images/{image_id}")
    def image_bytes(image_id: int):
        record = store.get_image(image_id)
        path = image_root / record.storage_path
        if not path.exists():
            raise errors.UnknownImage(f"image file {record.storage_path} missing")
        media = MEDIA_TYPES.get(path.suffix.lower(), "application/octet-stream")
        return FileResponse(path, media_type=media)

    @app.get("/heatmaps/{inference_id}")
    def heatmap_bytes(inference_id: int):
        path = heatmap_dir / f"heatmap_{inference_id}.pgm"
        if not path.exists():
            raise errors.UnknownEntityError(f"no heatmap for inference {inference_id}")
        return FileResponse(path, media_type=MEDIA_TYPES[".pgm"])

    @app.get("/status")
    def status(window: int = DAY_MS_DEFAULT):
        t_to = now_ms()
        hist, per_run = analytics.status_metrics(store, t_to - window, t_to)
        return {"window": [t_to - window, t_to],
                "histograms": {stage: {"bucket_edges": list(h.bucket_edges),
                                       "counts": [int(c) for c in h.counts]}
                               for stage, h in hist.items()},
                "per_run": {stage: [[run, mean] for run, mean in series]
                            for stage, series in per_run.items()}}

    @app.get("/log")
    def log_digest(window: int = DAY_MS_DEFAULT):
        t_to = now_ms()
        digest = analytics.build_log_digest(store, t_to - window, t_to, heatmap_dir)
        return {"window": list(digest.window),
                "entries": [{"inference_id": e.inference_id, "image_id": e.image_id,
                             "classification": e.classification,
                             "classification_name": e.classification_name,
                             "confirmed": e.confirmed, "inferred_at": e.inferred_at,
                             "heatmap_ref": e.heatmap_ref} for e in digest.entries]}

    @app.get("/series")
    def series(plot_type: int,
               t_from: int = Query(alias="from"), t_to: int = Query(alias="to")):
        data = store.query_weight_series(plot_type, t_from, t_to)
        return {label: [[ts, w] for ts, w in points] for label, points in data.items()}

    @app.get("/alarms/stream")
    def alarms(cursor: int = 0, timeout_ms: int = 0):
        events, new_cursor = bus.read_since(cursor, timeout_ms / 1000.0)
        return {"cursor": new_cursor,
                "events": [{"inference_id": e.inference_id,
                            "plot_type_id": e.plot_type_id, "kind": e.kind.value,
                            "raised_at": e.raised_at} for e in events]}

    if config.static_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=config.static_dir, html=True),
                  name="ui")

    return app
