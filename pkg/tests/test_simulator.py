import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdagg.channel import default_channel_table, frame_erasure_prob
from mdagg.simulator import (
    ApQueueState,
    Packet,
    SimConfig,
    SimError,
    aggregate_multi_dest,
    aggregate_single_dest,
    apply_channel,
    coded_vs_uncoded_configs,
    run,
)


def queue_of(flows, size=500, capacity=1000):
    q = ApQueueState(capacity)
    for i, f in enumerate(flows):
        q.offer(Packet(f, 0.0, size, i))
    return q


def test_single_dest_takes_head_destination():
    q = queue_of([0, 1, 0])
    got = aggregate_single_dest(q, 65535)
    assert [p.pid for p in got] == [0, 2]
    assert [p.pid for p in q.fifo] == [1]


def test_single_dest_capacity():
    q = queue_of([4] * 300)
    assert len(aggregate_single_dest(q, 65535)) == 65535 // 520 == 126
    assert len(q) == 300 - 126


def test_single_dest_unique_head():
    assert len(aggregate_single_dest(queue_of([3, 1, 2, 1]), 65535)) == 1


def test_multi_dest_fifo_prefix():
    q = queue_of([i % 7 for i in range(200)])
    got = aggregate_multi_dest(q, 65535)
    assert [p.pid for p in got] == list(range(126))
    assert [p.pid for p in q.fifo] == list(range(126, 200))


def test_multi_dest_single_packet():
    assert len(aggregate_multi_dest(queue_of([5]), 65535)) == 1


def test_aggregate_empty_queue():
    with pytest.raises(SimError):
        aggregate_multi_dest(ApQueueState(5), 65535)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=300), st.integers(520, 70000))
def test_multi_takes_at_least_single(flows, cap):
    single = aggregate_single_dest(queue_of(flows), cap)
    multi = aggregate_multi_dest(queue_of(flows), cap)
    assert len(multi) >= len(single)


def test_retries_go_first():
    q = queue_of([1, 2])
    q.retx.append(Packet(3, 0.0, 500, 99))
    assert aggregate_multi_dest(q, 1040)[0].pid == 99


def test_droptail():
    q = ApQueueState(2)
    assert q.offer(Packet(0, 0, 1, 0)) and q.offer(Packet(0, 0, 1, 1))
    assert not q.offer(Packet(0, 0, 1, 2))
    assert q.drops == 1 and len(q) == 2


def test_apply_channel_error_free():
    rng = np.random.default_rng(0)
    ok = apply_channel([(0, 520)] * 50, "uncoded", lambda f: 1, lambda c: (0.0, 0.0), rng, 54)
    assert ok.all()


def test_apply_channel_erasure_rate():
    pu = 1 - 0.7 ** (1 / (8 * 520))
    assert frame_erasure_prob(pu, 8 * 520) == pytest.approx(0.3)
    rng = np.random.default_rng(7)
    ok = apply_channel([(0, 520)] * 100_000, "uncoded", lambda f: 1, lambda c: (pu, pu), rng, 54)
    assert abs((1 - ok.mean()) - 0.3) <= 0.01


def test_apply_channel_coded_threshold():
    rng = np.random.default_rng(0)
    args = ([(0, 520)] * 10, "timesharing", lambda f: 1, lambda c: (0.1, 0.1), rng, 36)
    assert not apply_channel(*args, code_rates={1: 0.6}).any()
    assert apply_channel(*args, code_rates={1: 0.4}).all()


def test_zero_arrivals():
    m = run(SimConfig(arrival_rate=0.0, sim_duration=1.0))
    assert m.per_flow_throughput == 0.0
    assert m.mean_downlink_delay == 0.0
    assert m.ap_frames == 0


def test_single_light_flow_delivers_offered_load():
    cfg = SimConfig(n_stations=1, arrival="cbr", arrival_rate=400e3, uplink_enabled=False, sim_duration=5.0)
    m = run(cfg)
    assert m.per_flow_throughput == pytest.approx(400e3, rel=0.01)
    assert m.drop_rate == 0.0
    assert m.mean_downlink_delay > 0


def conserved(m):
    for d in m.per_flow_detail:
        assert d["arrivals"] == d["delivered"] + d["dropped"] + d["queued"] + d["in_flight"]
        assert d["uplink_arrivals"] == (d["uplink_delivered"] + d["uplink_dropped"]
                                        + d["uplink_queued"] + d["uplink_in_flight"])


def test_conservation_error_free():
    conserved(run(SimConfig(arrival_rate=2000, queue_capacity=50, sim_duration=1.0, seed=4)))


def test_conservation_noisy_channel():
    cfg = SimConfig(n_stations=6, n_class1=3, arrival_rate=800, phy_rate_map={1: 36, 2: 54},
                    rssi_map={1: 14, 2: 35}, channel=default_channel_table(), sim_duration=1.0, seed=2)
    m = run(cfg)
    conserved(m)
    assert any(d["dropped"] for d in m.per_flow_detail)


def test_conservation_aggregation_single():
    conserved(run(SimConfig(aggregation="single", arrival_rate=1500, sim_duration=1.0, seed=9)))


def test_deterministic():
    cfg = SimConfig(arrival_rate=1500, sim_duration=0.5, seed=11)
    a, b = io.StringIO(), io.StringIO()
    assert run(cfg, a).to_dict() == run(cfg, b).to_dict()
    assert a.getvalue() == b.getvalue()
    assert run(cfg).to_dict() != run(SimConfig(arrival_rate=1500, sim_duration=0.5, seed=12)).to_dict()


def test_queue_never_exceeds_capacity():
    ts = io.StringIO()
    run(SimConfig(arrival_rate=3000, queue_capacity=40, sim_duration=0.5), ts)
    rows = ts.getvalue().splitlines()
    assert rows[0] == "time_s,queue_len,agg_count"
    assert max(int(r.split(",")[1]) for r in rows[1:]) <= 40


def test_overload_drops_at_the_tail():
    cfg = SimConfig(n_stations=1, arrival_rate=5000, queue_capacity=30, uplink_enabled=False,
                    aggregation="single", max_agg_frame=540 * 3, sim_duration=0.5)
    m = run(cfg)
    d = m.per_flow_detail[0]
    assert d["arrivals"] == d["delivered"] + d["dropped"] + d["queued"] + d["in_flight"]
    assert m.drop_rate > 0


@pytest.mark.parametrize("lam", [200, 1000, 2000])
def test_multi_beats_single(lam):
    kw = dict(arrival_rate=lam, queue_capacity=100, sim_duration=2.0, seed=3)
    single = run(SimConfig(aggregation="single", **kw))
    multi = run(SimConfig(aggregation="multi", **kw))
    assert multi.per_flow_throughput >= single.per_flow_throughput
    assert multi.mean_pkts_per_agg_frame >= single.mean_pkts_per_agg_frame


def test_larger_queue_not_slower():
    s = [run(SimConfig(arrival="saturated", queue_capacity=q, sim_duration=2.0, seed=3)).per_flow_throughput
         for q in (25, 50, 100, 200)]
    assert all(b >= a for a, b in zip(s, s[1:]))


def test_rts_cts_costs_airtime():
    # no uplink, so no collisions for the handshake to shorten
    kw = dict(arrival="saturated", queue_capacity=50, uplink_enabled=False, sim_duration=1.0, seed=1)
    assert run(SimConfig(rts_cts=True, **kw)).per_flow_throughput < run(SimConfig(**kw)).per_flow_throughput


def test_coded_beats_uncoded_on_class1():
    unc, coded = coded_vs_uncoded_configs(sim_duration=1.0)
    mu, mc = run(unc), run(coded)
    assert mc.per_flow_throughput > mu.per_flow_throughput
    assert mc.drop_rate <= mu.drop_rate


def test_config_validation():
    with pytest.raises(SimError):
        SimConfig(queue_capacity=0)
    with pytest.raises(SimError):
        SimConfig(sim_duration=0)
    with pytest.raises(SimError):
        SimConfig(phy_rate_map={1: 7, 2: 54})
    with pytest.raises(ValueError):
        SimConfig(aggregation="both")
