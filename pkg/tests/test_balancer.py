import threading

import numpy as np
import pytest

from hydra_dqm import Channel, InferenceOrder, LoadBalancer
from hydra_dqm.errors import DuplicateEndpoint, NoWorkers, UnknownEndpoint
from hydra_dqm.wire import decode_order, encode_order


def make_order(order_id):
    payload = np.full((3, 3, 1), 0.5, dtype=np.float32)
    return InferenceOrder(order_id, order_id, 1, payload, {"feeder": 0.001}, 1000)


def balancer_with_workers(n, capacity=0):
    lb = LoadBalancer()
    channels = []
    for i in range(n):
        ch = Channel(capacity)
        lb.register_worker(f"w{i}", ch)
        channels.append(ch)
    return lb, channels


def test_round_robin_sequence():
    lb, _ = balancer_with_workers(3)
    seq = [lb.dispatch(make_order(i)) for i in range(7)]
    assert seq == [0, 1, 2, 0, 1, 2, 0]


def test_single_worker_gets_everything():
    lb, _ = balancer_with_workers(1)
    assert all(lb.dispatch(make_order(i)) == 0 for i in range(5))


def test_exact_split_counting_oracle():
    lb, channels = balancer_with_workers(4)
    counts = [0, 0, 0, 0]
    for i in range(1000):
        counts[lb.dispatch(make_order(i))] += 1
    assert counts == [250, 250, 250, 250]
    assert [ch.qsize() for ch in channels] == [250, 250, 250, 250]


def test_fairness_unbalanced_totals():
    # per-worker counts differ by at most 1 for any M
    for n, m in [(3, 10), (4, 7), (5, 23)]:
        lb, _ = balancer_with_workers(n)
        counts = [0] * n
        for i in range(m):
            counts[lb.dispatch(make_order(i))] += 1
        assert max(counts) - min(counts) <= 1


def test_no_workers_refused():
    lb = LoadBalancer()
    with pytest.raises(NoWorkers):
        lb.dispatch(make_order(1))


def test_register_deregister():
    lb, _ = balancer_with_workers(2)
    with pytest.raises(DuplicateEndpoint):
        lb.register_worker("w0", Channel())
    assert lb.deregister_worker("w0") == 1
    with pytest.raises(UnknownEndpoint):
        lb.deregister_worker("w0")
    seq = [lb.dispatch(make_order(i)) for i in range(3)]
    assert seq == [0, 0, 0]
    lb.deregister_worker("w1")
    with pytest.raises(NoWorkers):
        lb.dispatch(make_order(9))


def test_deregister_mid_stream_replay_oracle():
    lb, _ = balancer_with_workers(3)
    survivors = []
    for i in range(6):
        lb.dispatch(make_order(i))
    lb.deregister_worker("w1")
    for i in range(6, 12):
        survivors.append(lb.registry.endpoints()[lb.dispatch(make_order(i))])
    counts = {e: survivors.count(e) for e in set(survivors)}
    assert set(counts) == {"w0", "w2"}
    assert max(counts.values()) - min(counts.values()) <= 1


def test_pass_through_bytes_identical():
    lb, channels = balancer_with_workers(1, capacity=4)
    order = make_order(5)
    frame = encode_order(order)
    lb.dispatch_frame(frame)
    forwarded = channels[0].recv()
    # only a balancer timing entry is appended; everything else identical
    back = decode_order(forwarded)
    assert back.payload.tobytes() == order.payload.tobytes()
    assert list(back.stage_timings)[:-1] == list(order.stage_timings)
    assert list(back.stage_timings)[-1] == "balancer"
    stripped = dict(back.stage_timings)
    stripped.pop("balancer")
    assert stripped == order.stage_timings


def test_per_link_ordering():
    lb, channels = balancer_with_workers(2, capacity=0)
    for i in range(10):
        lb.dispatch(make_order(i))
    for w, ch in enumerate(channels):
        ids = []
        while ch.qsize():
            ids.append(decode_order(ch.recv()).order_id)
        assert ids == [i for i in range(10) if i % 2 == w]


def test_run_loop_closes_workers():
    lb, channels = balancer_with_workers(2, capacity=0)
    thread = threading.Thread(target=lb.run)
    thread.start()
    for i in range(4):
        lb.inbound.send(encode_order(make_order(i)))
    lb.inbound.close()
    thread.join(timeout=5)
    assert not thread.is_alive()
    seen = []
    for ch in channels:
        while True:
            frame = ch.recv(timeout=1)
            if frame is None:
                break
            seen.append(decode_order(frame).order_id)
    assert sorted(seen) == [0, 1, 2, 3]


def test_dispatch_times_recorded():
    lb, _ = balancer_with_workers(2)
    for i in range(50):
        lb.dispatch(make_order(i))
    assert len(lb.dispatch_seconds) == 50
    assert all(t >= 0 for t in lb.dispatch_seconds)
