import numpy as np
import pytest

from hydra_dqm import Channel, CollectReason, Report, Severity
from hydra_dqm.errors import MissingThreshold
from hydra_dqm.keeper import (
    AlarmBus,
    AlarmKind,
    CollectionPolicy,
    Keeper,
    collection_draw,
    confirm,
    decide_collection,
)

from conftest import register_frame


def make_report(order_id, image_id, model, weights, classification,
                gradcam=None, inferred_at=None, timings=None):
    return Report(order_id, image_id, model.model_id,
                  np.asarray(weights, dtype=np.float64), classification, gradcam,
                  dict(timings or {"feeder": 0.001, "predict": 0.02}),
                  inferred_at if inferred_at is not None else 1_700_000_000_000)


@pytest.fixture
def keeper(store, tmp_path):
    return Keeper(store, Channel(16), tmp_path / "heatmaps", rng_seed=1234,
                  dead_letter_dir=tmp_path / "dead")


# -- confirm -----------------------------------------------------------------

def dummy_report(weights, classification, label_order):
    return Report(1, 1, 1, np.asarray(weights, float), classification, None, {}, 0)


def test_confirm_above_threshold():
    r = dummy_report([0.95, 0.05], 10, (10, 11))
    assert confirm(r, (10, 11), {10: 0.9, 11: 0.9}) is True


def test_confirm_boundary_is_strict():
    r = dummy_report([0.90, 0.10], 10, (10, 11))
    assert confirm(r, (10, 11), {10: 0.9, 11: 0.9}) is False


def test_confirm_zero_threshold_always_confirms_positive():
    r = dummy_report([0.51, 0.49], 10, (10, 11))
    assert confirm(r, (10, 11), {10: 0.0, 11: 0.0}) is True


def test_confirm_weight_exactly_one_vs_threshold_one():
    # threshold 1: even a weight of exactly 1.0 stays unconfirmed (1 > 1 false)
    r = dummy_report([1.0, 0.0], 10, (10, 11))
    assert confirm(r, (10, 11), {10: 1.0, 11: 1.0}) is False


def test_confirm_missing_threshold():
    r = dummy_report([0.9, 0.1], 10, (10, 11))
    with pytest.raises(MissingThreshold):
        confirm(r, (10, 11), {11: 0.5})


# -- decide_collection ----------------------------------------------------------

def test_bad_class_takes_precedence():
    policy = CollectionPolicy(0.0, rng_seed=1)
    r = dummy_report([0.9, 0.1], 10, (10, 11))
    assert decide_collection(r, True, policy, Severity.BAD) == \
        (True, CollectReason.BAD_CLASS)


def test_unconfirmed_collected():
    policy = CollectionPolicy(0.0, rng_seed=1)
    r = dummy_report([0.9, 0.1], 10, (10, 11))
    assert decide_collection(r, False, policy, Severity.GOOD) == \
        (True, CollectReason.UNCONFIRMED)


def test_random_sample_rate_within_binomial_bound():
    # 10000 seeded draws at p=0.1: expected 1000, 3 sigma ~ +/- 90
    policy = CollectionPolicy(0.1, rng_seed=77)
    collected = 0
    for image_id in range(10_000):
        r = Report(image_id, image_id, 1, np.array([0.9, 0.1]), 10, None, {}, 0)
        got, reason = decide_collection(r, True, policy, Severity.GOOD)
        assert reason in (CollectReason.RANDOM_SAMPLE, CollectReason.NONE)
        collected += got
    assert 900 <= collected <= 1100


def test_draw_is_order_independent():
    a = collection_draw(5, 1000)
    b = collection_draw(5, 1000)
    assert a == b
    assert collection_draw(5, 1001) != a
    assert collection_draw(6, 1000) != a


# -- handle_report ------------------------------------------------------------------

def ids_by_name(plot_type):
    return {l.name: l.label_id for l in plot_type.labels}


def test_confirmed_good_no_queue_no_alarm(store, plot_type, seeded_model, keeper,
                                          tmp_path):
    image = register_frame(store, plot_type, tmp_path, 0)
    good = ids_by_name(plot_type)["Good"]
    store.set_thresholds(seeded_model.model_id,
                         {lid: 0.5 for lid in seeded_model.label_order})
    # pick an image id whose draw is >= p so RandomSample does not fire
    assert collection_draw(keeper.rng_seed, image.image_id) >= 0.1
    entry = keeper.handle_report(make_report(1, image.image_id, seeded_model,
                                             (0.9, 0.1), good))
    assert entry.confirmed and not entry.collected
    assert entry.collect_reason is CollectReason.NONE
    assert "keeper" in entry.stage_timings
    assert store.query_unlabeled(plot_type.plot_type_id, 10) == []
    assert store.query_runtime(plot_type.plot_type_id,
                               now=entry.inferred_at) != []
    assert keeper.alarm_bus.read_since(0)[0] == []


def test_confirmed_bad_queues_alarms_and_stores_heatmap(store, plot_type,
                                                        seeded_model, keeper,
                                                        tmp_path):
    image = register_frame(store, plot_type, tmp_path, 1)
    bad = ids_by_name(plot_type)["Bad"]
    store.set_thresholds(seeded_model.model_id,
                         {lid: 0.5 for lid in seeded_model.label_order})
    heatmap = np.linspace(0, 1, 256, dtype=np.float32).reshape(16, 16)
    entry = keeper.handle_report(make_report(2, image.image_id, seeded_model,
                                             (0.2, 0.8), bad, gradcam=heatmap))
    assert entry.confirmed and entry.collected
    assert entry.collect_reason is CollectReason.BAD_CLASS
    queued = store.query_unlabeled(plot_type.plot_type_id, 10)
    assert [r.image_id for r in queued] == [image.image_id]
    events, _ = keeper.alarm_bus.read_since(0)
    assert [e.kind for e in events] == [AlarmKind.CONFIRMED_BAD]
    assert keeper.heatmap_path(entry.inference_id).exists()
    runtime = store.query_runtime(plot_type.plot_type_id, now=entry.inferred_at)
    assert runtime[0].gradcam_ref == str(keeper.heatmap_path(entry.inference_id))


def test_unconfirmed_raises_unconfirmed_alarm(store, plot_type, seeded_model,
                                              keeper, tmp_path):
    image = register_frame(store, plot_type, tmp_path, 2)
    good = ids_by_name(plot_type)["Good"]
    store.set_thresholds(seeded_model.model_id,
                         {lid: 0.95 for lid in seeded_model.label_order})
    entry = keeper.handle_report(make_report(3, image.image_id, seeded_model,
                                             (0.9, 0.1), good))
    assert not entry.confirmed and entry.collected
    assert entry.collect_reason is CollectReason.UNCONFIRMED
    events, _ = keeper.alarm_bus.read_since(0)
    assert [e.kind for e in events] == [AlarmKind.UNCONFIRMED]


def test_duplicate_order_id_skipped(store, plot_type, seeded_model, keeper,
                                    tmp_path):
    image = register_frame(store, plot_type, tmp_path, 3)
    good = ids_by_name(plot_type)["Good"]
    store.set_thresholds(seeded_model.model_id,
                         {lid: 0.5 for lid in seeded_model.label_order})
    report = make_report(9, image.image_id, seeded_model, (0.9, 0.1), good)
    first = keeper.handle_report(report)
    assert first is not None
    assert keeper.handle_report(report) is None
    assert keeper.duplicates == 1
    assert len(store.query_inferences(plot_type_id=plot_type.plot_type_id)) == 1


def test_replay_fold_oracle(store, plot_type, seeded_model, keeper, tmp_path):
    # an independent fold over the same 100 reports reproduces RunHistory
    names = ids_by_name(plot_type)
    thresholds = {lid: 0.7 for lid in seeded_model.label_order}
    store.set_thresholds(seeded_model.model_id, thresholds)
    severity = {l.label_id: l.severity for l in plot_type.labels}
    order = list(seeded_model.label_order)

    rng = np.random.default_rng(31)
    reports = []
    for i in range(100):
        image = register_frame(store, plot_type, tmp_path, 100 + i)
        w0 = float(rng.uniform(0, 1))
        weights = (w0, 1.0 - w0)
        cls = order[int(np.argmax(weights))]
        reports.append(make_report(1000 + i, image.image_id, seeded_model,
                                   weights, cls, inferred_at=2_000_000 + i))
    for r in reports:
        keeper.handle_report(r)

    p = seeded_model.collect_percentage
    expected = []
    for r in reports:
        idx = order.index(r.classification)
        conf = r.output_weights[idx] > thresholds[r.classification]
        sev = severity[r.classification]
        if sev is Severity.BAD:
            reason = CollectReason.BAD_CLASS
        elif not conf:
            reason = CollectReason.UNCONFIRMED
        elif collection_draw(keeper.rng_seed, r.image_id) < p:
            reason = CollectReason.RANDOM_SAMPLE
        else:
            reason = CollectReason.NONE
        expected.append((r.image_id, r.classification, conf,
                         reason is not CollectReason.NONE, reason))

    got = [(e.image_id, e.classification, e.confirmed, e.collected,
            e.collect_reason)
           for e in store.query_inferences(plot_type_id=plot_type.plot_type_id)]
    assert sorted(got) == sorted(expected)
    assert any(e[4] is CollectReason.RANDOM_SAMPLE for e in expected)
    assert any(e[4] is CollectReason.NONE for e in expected)


def test_runtime_reflects_latest_window(store, plot_type, seeded_model, keeper,
                                        tmp_path):
    good = ids_by_name(plot_type)["Good"]
    store.set_thresholds(seeded_model.model_id,
                         {lid: 0.5 for lid in seeded_model.label_order})
    window_ms = int(store.retention_window_s * 1000)
    t0 = 1_700_000_000_000
    step = window_ms // 4
    times = [t0 + i * step for i in range(8)]  # spans 2x the window
    for i, at in enumerate(times):
        image = register_frame(store, plot_type, tmp_path, 200 + i)
        keeper.handle_report(make_report(2000 + i, image.image_id, seeded_model,
                                         (0.9, 0.1), good, inferred_at=at))
    latest = times[-1]
    got = store.query_runtime(plot_type.plot_type_id, now=latest)
    expected = [at for at in times if latest - at < window_ms]
    assert [e.inferred_at for e in got] == expected


class FlakyStore:
    """Delegating wrapper whose record_inference fails N times first."""

    def __init__(self, inner, failures):
        self._inner = inner
        self.failures = failures
        self.attempts = 0

    def record_inference(self, entry):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise OSError("simulated persistence fault")
        return self._inner.record_inference(entry)

    def __getattr__(self, name):
        return getattr(self._inner, name)


def test_persistence_retry_then_success(store, plot_type, seeded_model, tmp_path):
    flaky = FlakyStore(store, failures=2)
    keeper = Keeper(flaky, Channel(4), tmp_path / "heat", rng_seed=1,
                    dead_letter_dir=tmp_path / "dead", retry_backoff_s=0.001)
    image = register_frame(store, plot_type, tmp_path, 0)
    good = ids_by_name(plot_type)["Good"]
    entry = keeper.handle_report(make_report(1, image.image_id, seeded_model,
                                             (0.9, 0.1), good))
    assert entry is not None
    assert flaky.attempts == 3
    assert not (tmp_path / "dead").exists()


def test_persistent_failure_dead_letters_report(store, plot_type, seeded_model,
                                                tmp_path):
    flaky = FlakyStore(store, failures=99)
    keeper = Keeper(flaky, Channel(4), tmp_path / "heat", rng_seed=1,
                    dead_letter_dir=tmp_path / "dead", max_retries=2,
                    retry_backoff_s=0.001)
    image = register_frame(store, plot_type, tmp_path, 0)
    good = ids_by_name(plot_type)["Good"]
    report = make_report(7, image.image_id, seeded_model, (0.9, 0.1), good)
    assert keeper.handle_report(report) is None
    dead = tmp_path / "dead" / "report_7.bin"
    assert dead.exists()
    # the serialized report is recoverable
    from hydra_dqm.wire import decode_report
    recovered = decode_report(dead.read_bytes())
    assert recovered.order_id == 7
    assert recovered.image_id == image.image_id


def test_alarm_bus_long_poll(keeper):
    import threading

    from hydra_dqm.model import AlarmEvent

    results = []

    def wait():
        events, cursor = keeper.alarm_bus.read_since(0, timeout=5)
        results.append((events, cursor))

    t = threading.Thread(target=wait)
    t.start()
    keeper.alarm_bus.publish(AlarmEvent(1, 1, AlarmKind.CONFIRMED_BAD, 123))
    t.join(timeout=5)
    events, cursor = results[0]
    assert cursor == 1 and events[0].kind is AlarmKind.CONFIRMED_BAD
    # cursor pagination
    assert keeper.alarm_bus.read_since(cursor)[0] == []
