import json

import pytest

from hydra_dqm.experiment import ExperimentConfig, run_experiment


def small_config(workdir, **overrides):
    base = dict(workdir=str(workdir), width=24, height=24,
                n_train_good=30, n_train_bad=30, n_stream_frames=60,
                failure_onset=30, epochs=150, n_workers=2, poll_ms=10,
                timeout_s=30.0)
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_report(tmp_path_factory):
    return run_experiment(small_config(tmp_path_factory.mktemp("exp")))


def test_all_frames_inferred(small_report):
    assert small_report["n_inferred"] == 60
    assert small_report["worker_dead_letters"] == 0
    assert small_report["keeper_duplicates"] == 0


def test_training_converges(small_report):
    assert small_report["train_accuracy"] == 1.0


def test_detection_aligned_with_ground_truth(small_report):
    assert small_report["confirmed_bad_before_onset"] == 0
    assert small_report["first_confirmed_bad_sequence"] is not None
    assert small_report["first_confirmed_bad_sequence"] >= 30
    assert small_report["detection_latency_frames"] <= 5


def test_bad_frames_collected(small_report):
    # every Bad-classified frame is collected (reason precedence)
    bad_rows = [r for r in small_report["rows"] if r["classification"] == "Bad"]
    assert bad_rows
    assert all(r["collect_reason"] == "BadClass" for r in bad_rows)


def test_report_written(small_report, tmp_path):
    # the report JSON exists next to the experiment working dirs
    rows = small_report["rows"]
    assert all(set(r) == {"sequence", "image_id", "classification", "confirmed",
                          "collect_reason"} for r in rows)
    assert small_report["balancer_median_seconds"] is not None


def test_clean_stream_no_failures(tmp_path):
    config = small_config(tmp_path / "clean", n_stream_frames=30,
                          failure_onset=30)  # onset beyond the stream
    report = run_experiment(config)
    assert report["first_confirmed_bad_sequence"] is None
    assert report["confirmed_bad_before_onset"] == 0
    assert report["confusion"].get("Good->Bad", 0) == 0


def test_worker_count_invariance(tmp_path):
    rows = {}
    for n in (1, 4):
        config = small_config(tmp_path / f"workers{n}", n_workers=n)
        report = run_experiment(config)
        rows[n] = {(r["sequence"], r["image_id"], r["classification"],
                    r["confirmed"], r["collect_reason"]) for r in report["rows"]}
    assert rows[1] == rows[4]


def test_config_round_trips_through_json(tmp_path):
    config = small_config(tmp_path)
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"workdir": str(tmp_path / "exp"), "width": 24,
                                "height": 24, "n_stream_frames": 40,
                                "region": [4, 4, 8, 8]}))
    loaded = ExperimentConfig.from_json(path)
    assert loaded.n_stream_frames == 40
    assert loaded.region == (4, 4, 8, 8)
