"""Binary wire frames for orders and reports (docs/wire-format.md).

Frames are length-prefixed little-endian binary.  The stage-timing list
sits at the end of every frame so an intermediary (the balancer) can
append its own timing entry by splicing bytes without re-encoding the
payload.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ValidationError
from .model import InferenceOrder, Report

FRAME_ORDER = 1
FRAME_REPORT = 2


def _pack_timings(timings: dict[str, float]) -> bytes:
    parts = [struct.pack("<H", len(timings))]
    for name, seconds in timings.items():
        raw = name.encode("utf-8")
        if len(raw) > 255:
            raise ValidationError(f"stage name too long: {name!r}")
        parts.append(struct.pack("<B", len(raw)) + raw + struct.pack("<d", seconds))
    return b"".join(parts)


def _unpack_timings(data: bytes, off: int) -> tuple[dict[str, float], int]:
    (count,) = struct.unpack_from("<H", data, off)
    off += 2
    timings: dict[str, float] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<B", data, off)
        off += 1
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (seconds,) = struct.unpack_from("<d", data, off)
        off += 8
        timings[name] = seconds
    return timings, off


def encode_order(order: InferenceOrder) -> bytes:
    payload = np.ascontiguousarray(order.payload, dtype="<f4")
    if payload.ndim != 3:
        raise ValidationError(f"payload must be (h, w, c), got shape {payload.shape}")
    h, w, c = payload.shape
    body = b"".join([
        struct.pack("<B", FRAME_ORDER),
        struct.pack("<QQQq", order.order_id, order.image_id, order.plot_type_id,
                    order.created_at),
        struct.pack("<HHB", h, w, c),
        payload.tobytes(),
        _pack_timings(order.stage_timings),
    ])
    return struct.pack("<I", len(body)) + body


def decode_order(frame: bytes) -> InferenceOrder:
    body = _body(frame, FRAME_ORDER)
    order_id, image_id, plot_type_id, created_at = struct.unpack_from("<QQQq", body, 1)
    h, w, c = struct.unpack_from("<HHB", body, 33)
    off = 38
    count = h * w * c
    payload = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(h, w, c)
    off += 4 * count
    timings, _ = _unpack_timings(body, off)
    return InferenceOrder(order_id, image_id, plot_type_id, payload.copy(),
                          timings, created_at)


def encode_report(report: Report) -> bytes:
    weights = np.ascontiguousarray(report.output_weights, dtype="<f8")
    parts = [
        struct.pack("<B", FRAME_REPORT),
        struct.pack("<QQQq", report.order_id, report.image_id, report.model_id,
                    report.inferred_at),
        struct.pack("<Q", report.classification),
        struct.pack("<H", weights.size),
        weights.tobytes(),
    ]
    if report.gradcam is None:
        parts.append(struct.pack("<B", 0))
    else:
        heatmap = np.ascontiguousarray(report.gradcam, dtype="<f4")
        if heatmap.ndim != 2:
            raise ValidationError(f"heatmap must be 2-D, got shape {heatmap.shape}")
        parts.append(struct.pack("<BHH", 1, heatmap.shape[0], heatmap.shape[1]))
        parts.append(heatmap.tobytes())
    parts.append(_pack_timings(report.stage_timings))
    body = b"".join(parts)
    return struct.pack("<I", len(body)) + body


def decode_report(frame: bytes) -> Report:
    body = _body(frame, FRAME_REPORT)
    order_id, image_id, model_id, inferred_at = struct.unpack_from("<QQQq", body, 1)
    (classification,) = struct.unpack_from("<Q", body, 33)
    (n_weights,) = struct.unpack_from("<H", body, 41)
    off = 43
    weights = np.frombuffer(body, dtype="<f8", count=n_weights, offset=off).copy()
    off += 8 * n_weights
    (has_heatmap,) = struct.unpack_from("<B", body, off)
    off += 1
    heatmap = None
    if has_heatmap:
        hh, hw = struct.unpack_from("<HH", body, off)
        off += 4
        heatmap = np.frombuffer(body, dtype="<f4", count=hh * hw,
                                offset=off).reshape(hh, hw).copy()
        off += 4 * hh * hw
    timings, _ = _unpack_timings(body, off)
    return Report(order_id, image_id, model_id, weights, classification,
                  heatmap, timings, inferred_at)


def _body(frame: bytes, expected_type: int) -> bytes:
    if len(frame) < 5:
        raise ValidationError("frame too short")
    (length,) = struct.unpack_from("<I", frame, 0)
    body = frame[4:]
    if len(body) != length:
        raise ValidationError(f"frame length {len(body)} != declared {length}")
    if body[0] != expected_type:
        raise ValidationError(f"unexpected frame type {body[0]}")
    return body


def frame_type(frame: bytes) -> int:
    if len(frame) < 5:
        raise ValidationError("frame too short")
    return frame[4]


def splice_timing(frame: bytes, stage: str, seconds: float) -> bytes:
    """Append one timing entry to a frame without decoding the payload.

    Patches the trailing timing-list count and the length prefix; every
    other byte of the frame is passed through untouched.
    """
    (length,) = struct.unpack_from("<I", frame, 0)
    body = frame[4:]
    if len(body) != length:
        raise ValidationError(f"frame length {len(body)} != declared {length}")
    timings_off = _timings_offset(body)
    (count,) = struct.unpack_from("<H", body, timings_off)
    raw = stage.encode("utf-8")
    if len(raw) > 255:
        raise ValidationError(f"stage name too long: {stage!r}")
    entry = struct.pack("<B", len(raw)) + raw + struct.pack("<d", seconds)
    new_body = (body[:timings_off] + struct.pack("<H", count + 1)
                + body[timings_off + 2:] + entry)
    return struct.pack("<I", len(new_body)) + new_body


def _timings_offset(body: bytes) -> int:
    kind = body[0]
    if kind == FRAME_ORDER:
        h, w, c = struct.unpack_from("<HHB", body, 33)
        return 38 + 4 * h * w * c
    if kind == FRAME_REPORT:
        (n_weights,) = struct.unpack_from("<H", body, 41)
        off = 43 + 8 * n_weights
        (has_heatmap,) = struct.unpack_from("<B", body, off)
        off += 1
        if has_heatmap:
            hh, hw = struct.unpack_from("<HH", body, off)
            off += 4 + 4 * hh * hw
        return off
    raise ValidationError(f"unexpected frame type {kind}")
