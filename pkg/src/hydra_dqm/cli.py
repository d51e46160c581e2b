"""Command-line entry points (``hydra-dqm <subcommand>``).

Analytics subcommands print deterministic line-oriented text suitable
for golden-file testing; formats are documented in docs/cli.md.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading
from pathlib import Path

from . import analytics
from .api import ApiConfig, create_app
from .experiment import ExperimentConfig, Pipeline, run_experiment
from .model import now_ms
from .simulate import FailureSchedule, generate_stream
from .store import SqliteStore, init_schema


def _store_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--db", default=os.environ.get("HYDRA_DB_PATH", "hydra.db"))
    parser.add_argument("--image-root",
                        default=os.environ.get("HYDRA_IMAGE_ROOT", "images"))


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def cmd_schema_init(args) -> int:
    init_schema(args.db)
    print(f"schema ready in {args.db}")
    return 0


def cmd_feeder(args) -> int:
    store = SqliteStore(args.db)
    pipeline = Pipeline(store, Path(args.image_root), Path(args.heatmap_dir),
                        args.workers, keeper_seed=now_ms(),
                        input_dir=Path(args.input_dir),
                        reject_dir=Path(args.reject_dir),
                        poll_interval_s=args.poll_ms / 1000.0,
                        dead_letter_dir=Path(args.dead_letter_dir))
    pipeline.start()
    print(f"ingest pipeline running on {args.input_dir} "
          f"({args.workers} workers); Ctrl-C to stop")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    pipeline.stop()
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    store = SqliteStore(args.db)
    host, _, port = args.listen.rpartition(":")
    config = ApiConfig(image_root=args.image_root, heatmap_dir=args.heatmap_dir,
                       listen=args.listen, static_dir=args.static)
    uvicorn.run(create_app(store, config), host=host or "127.0.0.1", port=int(port))
    return 0


def _labeled_set(store, model_id):
    model = store.get_model(model_id)
    return model, analytics.labeled_evaluation_set(store, model.plot_type_id)


def cmd_analytics(args) -> int:
    store = SqliteStore(args.db)
    if args.analytics_cmd == "ecm":
        model, labeled = _labeled_set(store, args.model)
        matrix = analytics.build_ecm(store, args.image_root, args.model, labeled)
        print(f"ecm model {matrix.model_id} labels {','.join(matrix.label_names)}"
              f" total {matrix.total}")
        for i, true_name in enumerate(matrix.label_names):
            for j, pred_name in enumerate(matrix.label_names):
                cell = matrix.cells[i][j]
                weights = ",".join(_fmt(w) for w in cell.weight_samples)
                print(f"cell {true_name} {pred_name} count {cell.count}"
                      f" weights {weights}")
    elif args.analytics_cmd == "thresholds":
        model, labeled = _labeled_set(store, args.model)
        mapping = analytics.select_default_thresholds(store, args.image_root,
                                                      args.model, labeled)
        pt = store.get_plot_type(model.plot_type_id)
        for label_id in model.label_order:
            print(f"threshold {pt.label_by_id(label_id).name} "
                  f"{_fmt(mapping[label_id])}")
    elif args.analytics_cmd == "diff":
        model, labeled = _labeled_set(store, args.model)
        pt = store.get_plot_type(model.plot_type_id)
        diffs = analytics.training_diff(store, args.image_root, args.model, labeled)
        print(f"diff model {args.model} disagreements {len(diffs)}")
        for d in diffs:
            print(f"diff image {d.image_id} human {pt.label_by_id(d.human_label).name}"
                  f" model {pt.label_by_id(d.model_label).name}"
                  f" weight {_fmt(d.model_weight)}")
    elif args.analytics_cmd == "status":
        t_to = now_ms()
        hist, per_run = analytics.status_metrics(store, t_to - args.window_ms, t_to)
        for stage, h in hist.items():
            print(f"stage {stage} events {int(h.counts.sum())}")
            for i, count in enumerate(h.counts):
                if count:
                    print(f"hist {stage} {i} {h.bucket_edges[i]:.1e}"
                          f" {h.bucket_edges[i + 1]:.1e} {int(count)}")
        for stage, series in per_run.items():
            for run, mean in series:
                print(f"run-avg {stage} {run} {_fmt(mean)}")
    elif args.analytics_cmd == "log":
        t_to = now_ms()
        digest = analytics.build_log_digest(store, t_to - args.window_ms, t_to,
                                            args.heatmap_dir)
        print(f"log entries {len(digest.entries)}")
        for e in digest.entries:
            heatmap = e.heatmap_ref if e.heatmap_ref else "-"
            print(f"log {e.inference_id} image {e.image_id} {e.classification_name}"
                  f" confirmed={str(e.confirmed).lower()} at {e.inferred_at}"
                  f" heatmap {heatmap}")
    return 0


def cmd_simulate(args) -> int:
    schedule = FailureSchedule()
    if args.schedule:
        schedule = FailureSchedule.from_dict(json.loads(Path(args.schedule).read_text()))
    stream = generate_stream(args.plot_type, args.height, args.width, args.channels,
                             args.frames, schedule, args.seed, args.out,
                             run_number=args.run,
                             truth_path=args.truth or Path(args.out) / "truth.json")
    print(f"wrote {len(stream.filenames)} frames to {args.out}")
    return 0


def cmd_experiment(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    report = run_experiment(config)
    print(json.dumps({k: v for k, v in report.items() if k != "rows"}, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hydra-dqm")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("schema-init", help="create the sqlite schema")
    p.add_argument("--db", default=os.environ.get("HYDRA_DB_PATH", "hydra.db"))
    p.set_defaults(func=cmd_schema_init)

    p = sub.add_parser("feeder", help="run the ingest pipeline on an input directory")
    _store_args(p)
    p.add_argument("--input-dir", required=True)
    p.add_argument("--reject-dir", required=True)
    p.add_argument("--poll-ms", type=int, default=500)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--heatmap-dir", default="heatmaps")
    p.add_argument("--dead-letter-dir", default="dead_letters")
    p.set_defaults(func=cmd_feeder)

    p = sub.add_parser("serve", help="run the HTTP API service")
    _store_args(p)
    p.add_argument("--listen", default=os.environ.get("HYDRA_LISTEN", "127.0.0.1:8080"))
    p.add_argument("--heatmap-dir", default="heatmaps")
    p.add_argument("--static", default=None, help="frontend asset directory")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("analytics", help="model and pipeline analytics")
    sub_a = p.add_subparsers(dest="analytics_cmd", required=True)
    for name in ("ecm", "thresholds", "diff"):
        pa = sub_a.add_parser(name)
        _store_args(pa)
        pa.add_argument("--model", type=int, required=True)
        pa.set_defaults(func=cmd_analytics)
    pa = sub_a.add_parser("status")
    _store_args(pa)
    pa.add_argument("--window-ms", type=int, default=analytics.DAY_MS)
    pa.set_defaults(func=cmd_analytics)
    pa = sub_a.add_parser("log")
    _store_args(pa)
    pa.add_argument("--window-ms", type=int, default=analytics.DAY_MS)
    pa.add_argument("--heatmap-dir", default=None)
    pa.set_defaults(func=cmd_analytics)

    p = sub.add_parser("simulate", help="generate a synthetic image stream")
    p.add_argument("--plot-type", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--schedule", default=None, help="JSON failure schedule file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--run", type=int, default=1)
    p.add_argument("--truth", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run an end-to-end experiment")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
