import numpy as np
import pytest

from hydra_dqm import Channel, Feeder, MemoryStore
from hydra_dqm.imaging import write_pnm
from hydra_dqm.wire import decode_order


@pytest.fixture
def dirs(tmp_path):
    d = {name: tmp_path / name for name in ("input", "images", "rejects")}
    for p in d.values():
        p.mkdir()
    return d


@pytest.fixture
def feeder(store, plot_type, dirs):
    return Feeder(store, dirs["input"], dirs["images"], dirs["rejects"])


def drop_frame(input_dir, pt_name, seq, size=(20, 24), run=1, t=None, value=None):
    t = t if t is not None else 1_700_000_000_000 + seq * 1000
    name = f"{pt_name}_r{run}_s{seq}_t{t}.pgm"
    rng = np.random.default_rng(seq)
    img = np.full(size, value) if value is not None else rng.uniform(0, 1, size)
    write_pnm(input_dir / name, img)
    return name


def test_three_valid_files_three_orders(store, plot_type, feeder, dirs):
    for seq in range(3):
        drop_frame(dirs["input"], plot_type.name, seq)
    orders = feeder.scan_and_emit()
    assert len(orders) == 3
    assert list(dirs["input"].iterdir()) == []
    # registered, moved under the image root, payload at model input shape
    for order in orders:
        assert order.payload.shape == (plot_type.input_height,
                                       plot_type.input_width, plot_type.channels)
        record = store.get_image(order.image_id)
        assert (dirs["images"] / record.storage_path).exists()
        assert (record.width, record.height) == (24, 20)
        assert list(order.stage_timings) == ["feeder"]


def test_exactly_once_across_restart(store, plot_type, feeder, dirs):
    name = drop_frame(dirs["input"], plot_type.name, 0)
    assert len(feeder.scan_and_emit()) == 1
    # same file re-appears (e.g. producer re-drop after a restart)
    drop_frame(dirs["input"], plot_type.name, 0)
    fresh = Feeder(store, dirs["input"], dirs["images"], dirs["rejects"])
    assert fresh.scan_and_emit() == []
    assert store.is_processed(name)


def test_malformed_name_quarantined(store, plot_type, feeder, dirs):
    drop_frame(dirs["input"], plot_type.name, 0)
    drop_frame(dirs["input"], plot_type.name, 1)
    write_pnm(dirs["input"] / "garbage.pgm", np.zeros((4, 4)))
    orders = feeder.scan_and_emit()
    # partition oracle: valid files emit, the malformed one is rejected
    assert len(orders) == 2
    assert [p.name for p in dirs["rejects"].iterdir()] == ["garbage.pgm"]
    assert list(dirs["input"].iterdir()) == []
    assert feeder.rejected == 1


def test_unknown_plot_type_quarantined(store, plot_type, feeder, dirs):
    drop_frame(dirs["input"], "nonexistent", 0)
    assert feeder.scan_and_emit() == []
    assert len(list(dirs["rejects"].iterdir())) == 1


def test_corrupt_payload_quarantined(store, plot_type, feeder, dirs):
    bad = dirs["input"] / f"{plot_type.name}_r1_s0_t1000.pgm"
    bad.write_bytes(b"P5\n trunc")
    assert feeder.scan_and_emit() == []
    assert len(list(dirs["rejects"].iterdir())) == 1


def test_duplicate_identity_quarantined(store, plot_type, feeder, dirs):
    drop_frame(dirs["input"], plot_type.name, 0, t=1000)
    assert len(feeder.scan_and_emit()) == 1
    # same (plot_type, run, sequence) under a different timestamp
    drop_frame(dirs["input"], plot_type.name, 0, t=2000)
    assert feeder.scan_and_emit() == []
    assert len(list(dirs["rejects"].iterdir())) == 1


def test_emission_order_capture_time_then_sequence(store, plot_type, feeder, dirs):
    drop_frame(dirs["input"], plot_type.name, 5, t=3000)
    drop_frame(dirs["input"], plot_type.name, 1, t=1000)
    drop_frame(dirs["input"], plot_type.name, 3, t=1000)
    drop_frame(dirs["input"], plot_type.name, 2, t=2000)
    orders = feeder.scan_and_emit()
    sequences = [store.get_image(o.image_id).sequence for o in orders]
    assert sequences == [1, 3, 2, 5]


def test_partial_write_waits_for_stable_size(store, plot_type, dirs):
    feeder = Feeder(store, dirs["input"], dirs["images"], dirs["rejects"])
    name = f"{plot_type.name}_r1_s0_t1000.pgm"
    partial = b"P5\n24 20\n255\n" + b"\x00" * 100
    (dirs["input"] / name).write_bytes(partial)
    orders, activity = feeder.scan_pass()
    assert orders == [] and activity  # first sighting: size recorded
    # file keeps growing: still not emitted
    (dirs["input"] / name).write_bytes(partial + b"\x00" * 100)
    orders, _ = feeder.scan_pass()
    assert orders == []
    # completed and stable for one more poll
    full = np.zeros((20, 24))
    write_pnm(dirs["input"] / name, full)
    feeder.scan_pass()
    orders, _ = feeder.scan_pass()
    assert len(orders) == 1


def test_orders_flow_into_channel(store, plot_type, dirs):
    channel = Channel(16)
    feeder = Feeder(store, dirs["input"], dirs["images"], dirs["rejects"],
                    out=channel)
    drop_frame(dirs["input"], plot_type.name, 0)
    emitted = feeder.scan_and_emit()
    frame = channel.recv(timeout=1)
    decoded = decode_order(frame)
    assert decoded.order_id == emitted[0].order_id
    assert decoded.payload.tobytes() == emitted[0].payload.tobytes()


def test_payload_resize_and_grayscale(store, dirs):
    # 3-channel source file for a 1-channel plot type: luminance conversion
    from conftest import STANDARD_LABELS
    s = MemoryStore()
    pt = s.register_plot_type("rgbplot", 8, 8, 1, STANDARD_LABELS)
    feeder = Feeder(s, dirs["input"], dirs["images"], dirs["rejects"])
    name = "rgbplot_r1_s0_t1000.ppm"
    rgb = np.zeros((10, 10, 3))
    rgb[..., 0] = 1.0
    write_pnm(dirs["input"] / name, rgb)
    orders = feeder.scan_and_emit()
    assert orders[0].payload.shape == (8, 8, 1)
    np.testing.assert_allclose(orders[0].payload, 0.299, atol=1e-6)
