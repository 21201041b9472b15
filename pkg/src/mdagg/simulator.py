"""Slot-level simulation of an AP with aggregated downlink and contending uplink stations.

Time advances in idle MAC slots and busy periods. Stations whose backoff
reaches zero in the same slot collide. Backoff countdowns are skipped in one
jump to the next transmission or the next wake-up of an idle node.
Arrivals are pre-drawn per flow and admitted lazily: the queue only grows
between the instants at which the AP removes packets, so admitting everything
up to the next such instant in time order is exact.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import NamedTuple

import numpy as np

from .channel import ChannelTable, binary_entropy, frame_erasure_prob
from .framing import FCS_LEN, SUBHEADER_LEN, coded_length_bytes, decodable
from .macmodel import MacParams, OFDM_SYMBOL_US, SERVICE_TAIL_BITS, frame_overheads, tx_duration

BASE_RATE = 6
RTS_BYTES = 20
CTS_BYTES = 14
SUBFRAME_OVERHEAD = SUBHEADER_LEN + FCS_LEN


class SimError(ValueError):
    pass


class Arrival(str, Enum):
    POISSON = "poisson"  # rate in packets/s per flow
    CBR = "cbr"  # rate in bits/s per flow
    SATURATED = "saturated"  # queues refilled to capacity, rate ignored


class Aggregation(str, Enum):
    SINGLE = "single"
    MULTI = "multi"


class Coding(str, Enum):
    UNCODED = "uncoded"
    TIMESHARING = "timesharing"


@dataclass(frozen=True)
class SimConfig:
    n_stations: int = 10
    arrival: Arrival = Arrival.POISSON
    arrival_rate: float = 2000.0
    packet_size: int = 500
    ip_header: int = 40
    queue_capacity: int = 200
    max_agg_frame: int = 65535
    aggregation: Aggregation = Aggregation.MULTI
    coding: Coding = Coding.UNCODED
    n_class1: int = 0
    phy_rate_map: dict = field(default_factory=lambda: {1: 54, 2: 54})
    rssi_map: dict = field(default_factory=lambda: {1: 12.0, 2: 35.0})
    code_rate: float | None = None
    margin: float = 0.05
    rts_cts: bool = False
    uplink_enabled: bool = True
    sim_duration: float = 10.0
    seed: int = 0
    channel: ChannelTable | None = None
    params: MacParams = field(default_factory=MacParams)

    def __post_init__(self):
        for name, enum in (("arrival", Arrival), ("aggregation", Aggregation), ("coding", Coding)):
            object.__setattr__(self, name, enum(getattr(self, name)))
        object.__setattr__(self, "phy_rate_map", {int(k): int(v) for k, v in self.phy_rate_map.items()})
        object.__setattr__(self, "rssi_map", {int(k): float(v) for k, v in self.rssi_map.items()})
        if self.queue_capacity < 1:
            raise SimError("queue_capacity must be >= 1")
        if not self.sim_duration > 0:
            raise SimError("sim_duration must be positive")
        if self.n_stations < 0 or not 0 <= self.n_class1 <= self.n_stations:
            raise SimError("need 0 <= n_class1 <= n_stations")
        if self.packet_size < 1 or self.ip_header < 0:
            raise SimError("packet_size must be >= 1 and ip_header >= 0")
        if self.arrival_rate < 0:
            raise SimError("arrival_rate must be non-negative")
        for c in (1, 2):
            if c not in self.phy_rate_map:
                raise SimError(f"phy_rate_map needs class {c}")
            if self.phy_rate_map[c] not in self.params.rate_table:
                raise SimError(f"class {c} PHY rate {self.phy_rate_map[c]} not in {sorted(self.params.rate_table)}")
        if self.code_rate is not None and not 0 < self.code_rate <= 1:
            raise SimError("code_rate must lie in (0, 1]")
        if self.wire_size + SUBFRAME_OVERHEAD > self.max_agg_frame:
            raise SimError("a single packet does not fit the aggregate limit")

    @property
    def wire_size(self) -> int:
        return self.packet_size + self.ip_header

    def station_class(self, station: int) -> int:
        return 1 if station < self.n_class1 else 2


class Packet(NamedTuple):
    flow: int
    arrival: float
    size: int
    pid: int


class ApQueueState:
    """DropTail FIFO plus the packets already handed to the MAC for retry."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.fifo = deque()
        self.retx = deque()
        self.drops = 0
        self.tries = {}

    def __len__(self):
        return len(self.fifo)

    def offer(self, pkt: Packet) -> bool:
        if len(self.fifo) >= self.capacity:
            self.drops += 1
            return False
        self.fifo.append(pkt)
        return True

    def pending(self):
        yield from self.retx
        yield from self.fifo

    def take(self, chosen) -> list:
        ids = {p.pid for p in chosen}
        self.retx = deque(p for p in self.retx if p.pid not in ids)
        self.fifo = deque(p for p in self.fifo if p.pid not in ids)
        return list(chosen)

    def empty(self) -> bool:
        return not self.fifo and not self.retx


def _default_cost(pkt):
    return pkt.size + SUBFRAME_OVERHEAD


def aggregate_single_dest(queue: ApQueueState, max_bytes: int, cost=_default_cost) -> list:
    """Packets for the head-of-line destination, FIFO, while they fit."""
    items = list(queue.pending())
    if not items:
        raise SimError("queue is empty")
    dest = items[0].flow
    chosen, used = [], 0
    for p in items:
        if p.flow != dest:
            continue
        if used + cost(p) > max_bytes:
            break
        chosen.append(p)
        used += cost(p)
    return queue.take(chosen)


def aggregate_multi_dest(queue: ApQueueState, max_bytes: int, cost=_default_cost) -> list:
    """Packets in FIFO order regardless of destination, while they fit."""
    if queue.empty():
        raise SimError("queue is empty")
    chosen, used = [], 0
    for p in queue.pending():
        if used + cost(p) > max_bytes:
            break
        chosen.append(p)
        used += cost(p)
    return queue.take(chosen)


@dataclass
class SimMetrics:
    per_flow_throughput: float
    mean_downlink_delay: float
    mean_pkts_per_agg_frame: float
    collision_rate: float
    drop_rate: float
    per_flow_detail: list
    network_throughput: float = 0.0
    uplink_per_flow_throughput: float = 0.0
    ap_frames: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _airtime(nbytes, rate, params):
    return OFDM_SYMBOL_US * math.ceil((nbytes * 8 + SERVICE_TAIL_BITS) / params.dbps(rate)) + params.t_phyhdr


def rts_cts_overhead(params: MacParams) -> float:
    """RTS + SIFS + CTS + SIFS at the base rate."""
    return _airtime(RTS_BYTES, BASE_RATE, params) + _airtime(CTS_BYTES, BASE_RATE, params) + 2 * params.t_sifs


class _Channel:
    """Per-class BSC view of the configured channel table at a PHY rate."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self._cache = {}

    def stats(self, cls, rate):
        key = (cls, rate)
        if key not in self._cache:
            table = self.cfg.channel
            if table is None:
                p = pu = 0.0
            else:
                rssi = self.cfg.rssi_map[cls]
                p = table.crossover_for(rssi, rate)
                pu = table.first_event_error_for(rssi, rate) if table.fer_for(rssi, rate) < 1.0 else 1.0
            self._cache[key] = (p, pu)
        return self._cache[key]

    def code_rate(self, cls, rate):
        """Class-1 code rate: configured, else capacity less the margin. None means sent raw."""
        p, _ = self.stats(cls, rate)
        if self.cfg.coding is not Coding.TIMESHARING or cls != 1 or p == 0.0:
            return None
        if self.cfg.code_rate is not None:
            return self.cfg.code_rate
        return max((1.0 - binary_entropy(p)) * (1.0 - self.cfg.margin), 1e-3)


def apply_channel(subframes, coding, class_of, channel, rng, rate, margin=0.05, code_rates=None) -> np.ndarray:
    """Delivery outcome per sub-frame.

    ``subframes`` are on-air sub-frame sizes in bytes with their destination
    flows as ``(flow, nbytes)``; ``channel`` maps a class to ``(p, pu)``. Raw
    sub-frames are erased with the frame erasure probability of their length;
    coded ones succeed exactly when the code rate clears the margin-reduced
    capacity.
    """
    coding = Coding(coding)
    code_rates = code_rates or {}
    out = np.ones(len(subframes), dtype=bool)
    if not len(subframes):
        return out
    u = rng.random(len(subframes))
    for i, (flow, nbytes) in enumerate(subframes):
        cls = class_of(flow)
        p, pu = channel(cls)
        r = code_rates.get(cls) if coding is Coding.TIMESHARING else None
        if r is not None:
            out[i] = decodable(r, p, margin)
        elif pu > 0.0:
            out[i] = u[i] >= frame_erasure_prob(pu, 8 * nbytes)
    return out


def _arrival_times(cfg: SimConfig, rng, n_flows: int):
    """Sorted arrival times per flow within the simulated interval."""
    T = cfg.sim_duration
    out = []
    for _ in range(n_flows):
        if cfg.arrival is Arrival.SATURATED or cfg.arrival_rate == 0:
            out.append(np.empty(0))
        elif cfg.arrival is Arrival.POISSON:
            lam = cfg.arrival_rate
            n = int(lam * T + 10 * math.sqrt(lam * T) + 20)
            t = np.cumsum(rng.exponential(1.0 / lam, n))
            while t[-1] < T:
                t = np.concatenate([t, t[-1] + np.cumsum(rng.exponential(1.0 / lam, n))])
            out.append(t[t < T])
        else:
            gap = cfg.packet_size * 8.0 / cfg.arrival_rate
            # random phase so CBR flows are not slot-aligned with each other
            t0 = rng.random() * gap
            out.append(np.arange(t0, T, gap))
    return out


class _Flows:
    """Lazily admitted arrivals feeding one DropTail queue."""

    def __init__(self, times_per_flow, flow_ids, queue: ApQueueState, size: int, saturated: bool):
        times = np.concatenate(times_per_flow) if times_per_flow else np.empty(0)
        flows = np.concatenate([np.full(len(t), f) for t, f in zip(times_per_flow, flow_ids)]) if times_per_flow else np.empty(0, int)
        order = np.argsort(times, kind="stable")
        self.times = times[order]
        self.flows = flows[order].astype(int)
        self.ptr = 0
        self.queue = queue
        self.size = size
        self.flow_ids = list(flow_ids)
        self.saturated = saturated and bool(self.flow_ids)
        self._rr = 0
        self.arrivals = {f: 0 for f in self.flow_ids}
        self.dropped = {f: 0 for f in self.flow_ids}
        self.next_pid = 0

    def next_time(self) -> float:
        if self.saturated:
            return -math.inf
        return self.times[self.ptr] if self.ptr < len(self.times) else math.inf

    def admit(self, t: float) -> None:
        q = self.queue
        if self.saturated:
            while len(q.fifo) < q.capacity:
                f = self.flow_ids[self._rr % len(self.flow_ids)]
                self._rr += 1
                self._push(f, t)
            return
        end = int(np.searchsorted(self.times, t, side="right"))
        if end <= self.ptr:
            return
        space = max(q.capacity - len(q.fifo), 0)
        take = min(space, end - self.ptr)
        for k in range(self.ptr, self.ptr + take):
            self._push(int(self.flows[k]), float(self.times[k]))
        rest = self.flows[self.ptr + take:end]
        if len(rest):
            for f, c in zip(*np.unique(rest, return_counts=True)):
                self.arrivals[int(f)] += int(c)
                self.dropped[int(f)] += int(c)
            q.drops += len(rest)
        self.ptr = end

    def _push(self, f, t):
        self.arrivals[f] += 1
        self.queue.fifo.append(Packet(f, t, self.size, self.next_pid))
        self.next_pid += 1


class _Node:
    __slots__ = ("backoff", "stage", "flows", "pending")

    def __init__(self, flows):
        self.backoff = None
        self.stage = 0
        self.flows = flows
        self.pending = None


def run(config: SimConfig, timeseries=None) -> SimMetrics:
    """Simulate ``config.sim_duration`` seconds; optionally stream per-AP-frame
    rows (time, queue length, packets aggregated) as CSV to ``timeseries``."""
    cfg = config
    P = cfg.params
    sigma = P.idle_slot_sigma * 1e-6
    n = cfg.n_stations
    ss = np.random.SeedSequence(cfg.seed)
    r_arr, r_up, r_back, r_chan = (np.random.default_rng(s) for s in ss.spawn(4))
    saturated = cfg.arrival is Arrival.SATURATED
    chan = _Channel(cfg)
    class_of = cfg.station_class

    ap_q = ApQueueState(cfg.queue_capacity)
    down_ids = list(range(n))
    nodes = [_Node(_Flows(_arrival_times(cfg, r_arr, n), down_ids, ap_q, cfg.wire_size, saturated))]
    up_enabled = cfg.uplink_enabled
    up_times = _arrival_times(cfg, r_up, n) if up_enabled else [np.empty(0)] * n
    for s in range(n):
        q = ApQueueState(cfg.queue_capacity)
        nodes.append(_Node(_Flows([up_times[s]], [s], q, cfg.wire_size, saturated and up_enabled)))

    delivered = np.zeros(n, dtype=np.int64)
    delay_sum = np.zeros(n)
    up_delivered = np.zeros(n, dtype=np.int64)
    retry_drops = np.zeros(n, dtype=np.int64)
    up_retry_drops = np.zeros(n, dtype=np.int64)
    agg_counts = []
    attempts = collisions = 0
    t = 0.0
    T = cfg.sim_duration
    writer = csv.writer(timeseries, lineterminator="\n") if timeseries is not None else None
    if writer:
        writer.writerow(["time_s", "queue_len", "agg_count"])

    def draw(node):
        w = min(P.cw_min * 2 ** node.stage, P.cw_max)
        node.backoff = int(r_back.integers(0, w))

    def has_traffic(node):
        node.flows.admit(t)
        return node.pending is not None or not node.flows.queue.empty()

    def down_rate(pkts):
        return min(cfg.phy_rate_map[class_of(p.flow)] for p in pkts)

    def subframe_bytes(pkt, rate):
        r = chan.code_rate(class_of(pkt.flow), rate)
        body = pkt.size if r is None else coded_length_bytes(pkt.size, r)
        return body + SUBFRAME_OVERHEAD

    def assemble():
        q = ap_q
        # every sub-frame of one aggregate goes out at the slowest destination's rate
        rate = down_rate(list(q.pending()))
        cost = (lambda p: subframe_bytes(p, rate))
        agg = aggregate_multi_dest if cfg.aggregation is Aggregation.MULTI else aggregate_single_dest
        pkts = agg(q, cfg.max_agg_frame, cost)
        rate = down_rate(pkts)
        return pkts, rate, [subframe_bytes(p, rate) for p in pkts]

    def ap_duration(nbytes, rate):
        d = tx_duration(nbytes, rate, P) + frame_overheads(P, aggregated=True)
        return (d + (rts_cts_overhead(P) if cfg.rts_cts else 0.0)) * 1e-6

    def ap_collision(nbytes, rate):
        if cfg.rts_cts:
            return (P.t_difs + _airtime(RTS_BYTES, BASE_RATE, P) + P.t_sifs + _airtime(CTS_BYTES, BASE_RATE, P)) * 1e-6
        return ap_duration(nbytes, rate)

    def sta_duration(s):
        rate = cfg.phy_rate_map[class_of(s)]
        return (tx_duration(cfg.wire_size, rate, P) + frame_overheads(P)) * 1e-6

    ack_tail = (P.t_sifs + P.t_phyhdr + P.t_ack) * 1e-6

    while t < T:
        for node in nodes:
            if node.backoff is None and has_traffic(node):
                draw(node)
        active = [nd for nd in nodes if nd.backoff is not None]
        wake = min((nd.flows.next_time() for nd in nodes if nd.backoff is None), default=math.inf)
        if not active:
            if wake >= T:
                break
            t = wake
            continue
        k = min(nd.backoff for nd in active)
        t_tx = t + k * sigma
        if wake < t_tx:
            j = max(0, math.ceil((wake - t) / sigma - 1e-9))
            for nd in active:
                nd.backoff -= j
            t += j * sigma
            if j == 0:
                # wake-up falls inside this slot: let the new node join now
                t = max(t, wake)
            continue
        for nd in active:
            nd.backoff -= k
        t = t_tx
        if t >= T:
            break
        txs = [i for i, nd in enumerate(nodes) if nd.backoff == 0]
        frames = {}
        for i in txs:
            nd = nodes[i]
            nd.flows.admit(t)
            if i == 0:
                pkts, rate, sizes = assemble()
                frames[i] = (pkts, rate, sizes)
                if writer:
                    writer.writerow([f"{t:.9f}", len(ap_q), len(pkts)])
            elif nd.pending is None:
                nd.pending = nd.flows.queue.fifo.popleft()
        attempts += len(txs)
        if len(txs) == 1:
            i = txs[0]
            nd = nodes[i]
            if i == 0:
                pkts, rate, sizes = frames[0]
                agg_counts.append(len(pkts))
                dur = ap_duration(sum(sizes), rate)
                done = t + dur - ack_tail
                ok = apply_channel([(p.flow, b) for p, b in zip(pkts, sizes)], cfg.coding, class_of,
                                   lambda c: chan.stats(c, rate), r_chan, rate, cfg.margin,
                                   {c: chan.code_rate(c, rate) for c in (1, 2)})
                for p, good in zip(pkts, ok):
                    if good:
                        delivered[p.flow] += 1
                        delay_sum[p.flow] += done - p.arrival
                        ap_q.tries.pop(p.pid, None)
                    else:
                        tries = ap_q.tries.get(p.pid, 0) + 1
                        if tries > P.retry_limit_m:
                            ap_q.tries.pop(p.pid, None)
                            retry_drops[p.flow] += 1
                        else:
                            ap_q.tries[p.pid] = tries
                            ap_q.retx.append(p)
                nd.stage = 0
            else:
                s = i - 1
                dur = sta_duration(s)
                rate = cfg.phy_rate_map[class_of(s)]
                _, pu = chan.stats(class_of(s), rate)
                lost = pu > 0.0 and r_chan.random() < frame_erasure_prob(pu, 8 * (cfg.wire_size + P.l_machdr + P.l_fcs))
                if lost:
                    nd.stage += 1
                    if nd.stage > P.retry_limit_m:
                        up_retry_drops[s] += 1
                        nd.pending = None
                        nd.stage = 0
                else:
                    up_delivered[s] += 1
                    nd.pending = None
                    nd.stage = 0
            t += dur
        else:
            collisions += len(txs)
            dur = 0.0
            for i in txs:
                if i == 0:
                    pkts, rate, sizes = frames[0]
                    dur = max(dur, ap_collision(sum(sizes), rate))
                else:
                    dur = max(dur, sta_duration(i - 1))
            for i in txs:
                nd = nodes[i]
                nd.stage += 1
                if i == 0:
                    pkts = frames[0][0]
                    if nd.stage > P.retry_limit_m:
                        for p in pkts:
                            retry_drops[p.flow] += 1
                            ap_q.tries.pop(p.pid, None)
                        nd.stage = 0
                    else:
                        # retried ahead of the FIFO at the next opportunity
                        ap_q.retx.extendleft(reversed(pkts))
                elif nd.stage > P.retry_limit_m:
                    up_retry_drops[i - 1] += 1
                    nd.pending = None
                    nd.stage = 0
            t += dur
        for i in txs:
            nodes[i].backoff = None

    # arrivals still pending in the arrays belong to the simulated interval
    for nd in nodes:
        nd.flows.admit(min(t, T))
    ap_flows = nodes[0].flows
    in_flight = np.zeros(n, dtype=np.int64)
    queued = np.zeros(n, dtype=np.int64)
    for p in ap_q.retx:
        in_flight[p.flow] += 1
    for p in ap_q.fifo:
        queued[p.flow] += 1
    detail = []
    L = cfg.packet_size
    for f in range(n):
        detail.append({
            "flow": f,
            "class": class_of(f),
            "arrivals": ap_flows.arrivals[f],
            "delivered": int(delivered[f]),
            "dropped": ap_flows.dropped[f] + int(retry_drops[f]),
            "queued": int(queued[f]),
            "in_flight": int(in_flight[f]),
            "throughput_bps": 8.0 * L * delivered[f] / T,
            "mean_delay_s": float(delay_sum[f] / delivered[f]) if delivered[f] else 0.0,
            "uplink_arrivals": nodes[f + 1].flows.arrivals[f],
            "uplink_delivered": int(up_delivered[f]),
            "uplink_dropped": nodes[f + 1].flows.dropped[f] + int(up_retry_drops[f]),
            "uplink_queued": len(nodes[f + 1].flows.queue.fifo),
            "uplink_in_flight": int(nodes[f + 1].pending is not None),
        })
    total = int(delivered.sum())
    arrivals = sum(ap_flows.arrivals.values())
    drops = sum(d["dropped"] for d in detail)
    return SimMetrics(
        per_flow_throughput=8.0 * L * total / (T * n) if n else 0.0,
        mean_downlink_delay=float(delay_sum.sum() / total) if total else 0.0,
        mean_pkts_per_agg_frame=float(np.mean(agg_counts)) if agg_counts else 0.0,
        collision_rate=collisions / attempts if attempts else 0.0,
        drop_rate=drops / arrivals if arrivals else 0.0,
        per_flow_detail=detail,
        network_throughput=8.0 * L * total / T,
        uplink_per_flow_throughput=8.0 * L * int(up_delivered.sum()) / (T * n) if n else 0.0,
        ap_frames=len(agg_counts),
    )


def fig1_config(aggregation=Aggregation.MULTI, **kw) -> SimConfig:
    """10 downlink + 10 uplink Poisson flows at 2000 packets/s, 500-byte packets,
    200-packet AP buffer, 54 Mbps, RTS/CTS before data."""
    base = dict(n_stations=10, arrival=Arrival.POISSON, arrival_rate=2000.0, packet_size=500,
                queue_capacity=200, aggregation=aggregation, rts_cts=True, sim_duration=30.0)
    base.update(kw)
    return SimConfig(**base)


def coded_vs_uncoded_configs(text_rssi: bool = True, **kw):
    """Downlink-only CBR scenario with one class near and one far from the AP.

    Two RSSI pairs are in circulation for this setup (12/35 dBm and 18/33 dBm);
    ``text_rssi`` picks the first.
    """
    from .channel import default_channel_table

    rssi = {1: 12.0, 2: 35.0} if text_rssi else {1: 18.0, 2: 33.0}
    base = dict(n_stations=20, n_class1=10, arrival=Arrival.CBR, arrival_rate=1e6, packet_size=1500,
                queue_capacity=500, uplink_enabled=False, rssi_map=rssi, channel=default_channel_table())
    base.update(kw)
    uncoded = SimConfig(coding=Coding.UNCODED, phy_rate_map={1: 18, 2: 18}, **base)
    coded = SimConfig(coding=Coding.TIMESHARING, phy_rate_map={1: 36, 2: 36}, **base)
    return uncoded, coded
