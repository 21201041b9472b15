"""Max-min fair payload sizing and throughput for the aggregation schemes.

Two client classes share one WLAN with the AP: class 1 stations see a noisy
channel at the downlink PHY rate, class 2 stations are error-free at every
rate. The AP sends one aggregated frame per transmission opportunity that
carries a sub-frame for every station. Payload sizes are chosen so that every
downlink and uplink flow gets the same throughput.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from scipy.optimize import bisect, brentq

from .channel import ChannelError, ChannelTable, binary_entropy, default_channel_table, effective_crossover
from .macmodel import (
    AttemptState,
    MacParams,
    SlotTiming,
    bianchi_tau,
    frame_overheads,
    slot_timing,
    solve_fixed_point,
    tx_duration,
)


class Scheme(str, enum.Enum):
    UNCODED = "uncoded"
    TIMESHARING = "timesharing"
    SUPERPOSITION = "superposition"
    TIMESHARING_MULTIRATE = "timesharing_multirate"


class Traffic(str, enum.Enum):
    SATURATED_UNICAST = "unicast"
    MULTICAST = "multicast"


class Infeasible(ValueError):
    """No fair payload assignment exists; ``constraint`` names the one that failed."""

    def __init__(self, constraint, detail=""):
        super().__init__(f"{constraint}: {detail}" if detail else constraint)
        self.constraint = constraint


@dataclass(frozen=True)
class Scenario:
    n1: int
    n2: int
    rssi_class1: float = 12.0
    rssi_class2: float = 35.0
    frame_budget: int = 8000
    scheme: Scheme = Scheme.TIMESHARING
    traffic: Traffic = Traffic.SATURATED_UNICAST
    params: MacParams = field(default_factory=MacParams)
    channel: ChannelTable | None = None
    # "literal": AP term counts one class-1 and one class-2 sub-frame;
    # "weighted": AP term counts every delivered sub-frame
    downlink_weighting: str = "literal"

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 0 or self.n1 + self.n2 < 1:
            raise ValueError("need n1, n2 >= 0 and n1 + n2 >= 1")
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "traffic", Traffic(self.traffic))
        if self.downlink_weighting not in ("literal", "weighted"):
            raise ValueError("downlink_weighting must be 'literal' or 'weighted'")
        if self.channel is None:
            object.__setattr__(self, "channel", default_channel_table())
        if self.traffic is Traffic.SATURATED_UNICAST:
            need = (self.n1 + self.n2) * self.params.subframe_overhead
            if self.frame_budget < need:
                raise ValueError(f"frame budget {self.frame_budget} below sub-frame overhead {need}")

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)


@dataclass(frozen=True)
class SchemeSolution:
    scheme: Scheme
    phy_rate_down: int | tuple
    beta: float | None
    x1_down: float
    x2_down: float
    x1_up: float
    x2_up: float
    e1_down: float
    e2_down: float
    e1_up: float
    e2_up: float
    attempt: AttemptState
    timing: SlotTiming
    network_throughput: float
    per_flow_throughputs: tuple
    crossover: float = 0.0
    first_event_error: float = 0.0

    def whole_bytes(self) -> dict:
        """Payloads floored to whole bytes (values a rounding hair below an integer keep it)."""
        return {k: math.floor(getattr(self, k) + 1e-9) for k in ("x1_down", "x2_down", "x1_up", "x2_up")}

    @property
    def rate_label(self) -> str:
        r = self.phy_rate_down
        return f"{r[0]}+{r[1]}" if isinstance(r, tuple) else str(r)


def top_rate(params: MacParams) -> int:
    return max(params.rate_table)


def ap_duration(frame_bytes, rate, params) -> float:
    return tx_duration(frame_bytes, rate, params) + frame_overheads(params, rate, aggregated=True)


def station_duration(payload_bytes, rate, params) -> float:
    return tx_duration(payload_bytes, rate, params) + frame_overheads(params, rate)


def network_throughput(attempt: AttemptState, n1, n2, e1_down, e2_down, e1_up, e2_up,
                       expected_slot, weighting="literal") -> float:
    """Network throughput in Mbps (payload bytes per microsecond times 8)."""
    if expected_slot <= 0:
        return 0.0
    if weighting == "weighted":
        down = n1 * e1_down + n2 * e2_down
    else:
        down = e1_down + e2_down
    x0 = attempt.tau0 * (1.0 - attempt.pf0) * down
    x1 = attempt.tau1 * (1.0 - attempt.pf1) * e1_up
    x2 = attempt.tau2 * (1.0 - attempt.pf2) * e2_up
    return 8.0 * (x0 + n1 * x1 + n2 * x2) / expected_slot


def _per_flow(attempt, n1, n2, e1d, e2d, e1u, e2u, e_t):
    s = []
    down = 8.0 * attempt.tau0 * (1.0 - attempt.pf0) / e_t
    if n1:
        s.append(down * e1d)
    if n2:
        s.append(down * e2d)
    if n1 and e1u is not None:
        s.append(8.0 * attempt.tau1 * (1.0 - attempt.pf1) * e1u / e_t)
    if n2 and e2u is not None:
        s.append(8.0 * attempt.tau2 * (1.0 - attempt.pf2) * e2u / e_t)
    return tuple(s)


def _finish(sc, rate_down, beta, xs, es, up_air, t_ap, attempt, crossover=0.0, pu=0.0):
    """Assemble a solution given payloads, expected payloads and on-air uplink sizes."""
    p = sc.params
    r1 = rate_down[0] if isinstance(rate_down, tuple) else rate_down
    t1 = station_duration(up_air[0], r1, p) if sc.n1 else 0.0
    t2 = station_duration(up_air[1], top_rate(p), p) if sc.n2 else 0.0
    timing = slot_timing(attempt, sc.n1, sc.n2, (t_ap, t1, t2), p)
    e1d, e2d, e1u, e2u = es
    s = network_throughput(attempt, sc.n1, sc.n2, e1d, e2d, e1u, e2u, timing.expected_slot, sc.downlink_weighting)
    flows = _per_flow(attempt, sc.n1, sc.n2, e1d, e2d, e1u, e2u, timing.expected_slot)
    return SchemeSolution(sc.scheme, rate_down, beta, *xs, *es, attempt, timing, s, flows, crossover, pu)


def _class1_crossover(sc, rate):
    p = sc.channel.crossover_for(sc.rssi_class1, rate)
    if sc.n1 and p >= 0.5:
        raise Infeasible("class-1 capacity", f"crossover {p:.4g} at {rate} Mbps leaves zero capacity")
    return p


def _l1u_bits(x, rate, params):
    """Uplink class-1 frame length in bits, padded to whole OFDM symbols."""
    d = params.dbps(rate)
    return d * math.ceil(((x + params.l_machdr + params.l_fcs) * 8 + 22) / d)


def size_uncoded(sc: Scenario, rate) -> SchemeSolution:
    """Packet-erasure aggregation: class-1 sub-frames are padded so that their
    expected delivered payload matches the class-2 payload."""
    p = sc.params
    n1, n2, L = sc.n1, sc.n2, sc.frame_budget
    ov = p.subframe_overhead
    try:
        pu = sc.channel.first_event_error_for(sc.rssi_class1, rate) if n1 else 0.0
    except ChannelError as exc:
        raise Infeasible("class-1 erasure", str(exc)) from None
    keep = 1.0 - pu

    def delivered(x):
        return x * keep ** (8 * (x + ov))

    if n1 == 0:
        x1d, x2d = 0.0, L / n2 - ov
    elif n2 == 0:
        x1d, x2d = L / n1 - ov, 0.0
    else:
        def budget(x):
            return n1 * (x + ov) + n2 * (delivered(x) + ov) - L
        x1d = bisect(budget, 0.0, L / n1 - ov, xtol=1e-12, rtol=1e-15, maxiter=500)
        x2d = delivered(x1d)
    e1d = delivered(x1d) if n1 else 0.0
    e2d = x2d
    e_down = e1d if n1 else e2d
    if e_down < 1.0:
        raise Infeasible("downlink fairness", f"equalized payload {e_down:.3g} bytes is below one byte")

    if n1 == 0:
        state = solve_fixed_point(0, n2, p)
        x1u, e1u = 0.0, 0.0
        x2u = x2d
    else:
        x2u = x2d
        cache = {}

        def uplink_gap(x):
            kept = keep ** _l1u_bits(x, rate, p)
            if 1.0 - kept >= 1.0:
                # every class-1 uplink frame is erased
                return -e_down
            prev = cache.get("state")
            st = solve_fixed_point(n1, n2, p, pe1_up=1.0 - kept, init=prev)
            cache["state"] = st
            cache[x] = st
            return st.tau1 * (1.0 - st.pf1) * kept * x - st.tau0 * (1.0 - st.pf0) * e_down

        lo, cap = e_down, float(L)
        if uplink_gap(lo) > 0:
            x1u = lo
        else:
            hi = None
            steps = 80
            grid = [lo * (cap / lo) ** (k / steps) for k in range(1, steps + 1)]
            for x in grid:
                if uplink_gap(x) > 0:
                    hi = x
                    break
                lo = x
            if hi is None:
                raise Infeasible("uplink fairness",
                                 f"class-1 uplink cannot match {e_down:.4g}-byte flows at {rate} Mbps within {L} bytes")
            x1u = brentq(uplink_gap, lo, hi, xtol=1e-13, rtol=1e-15, maxiter=500)
        uplink_gap(x1u)
        state = cache[x1u]
        e1u = x1u * keep ** _l1u_bits(x1u, rate, p)
    e2u = x2u if n2 else 0.0
    t_ap = ap_duration(L, rate, p)
    return _finish(sc, rate, None, (x1d, x2d, x1u, x2u), (e1d, e2d, e1u, e2u), (x1u, x2u), t_ap, state,
                   pu=pu)


def _timesharing_payload(sc, rate):
    """Class-1 segment coded at the BSC capacity, class-2 segment uncoded."""
    pr = _class1_crossover(sc, rate)
    cap = 1.0 - binary_entropy(pr)
    x = sc.frame_budget / (sc.n1 / cap + sc.n2) - sc.params.subframe_overhead
    return rate, None, x, cap, pr, ap_duration(sc.frame_budget, rate, sc.params)


def solve_beta(n1: int, n2: int, p: float, tol: float = 1e-10) -> float:
    """Superposition density giving both classes the same per-station payload.

    With equal payloads and one shared frame, class 1 needs n1 / (1 - H(beta o p))
    channel uses per information bit and class 2 needs n2 / H(beta); equating
    gives n1 * H(beta) = n2 * (1 - H(beta o p)).
    """
    if n2 == 0:
        return 0.0
    if n1 == 0:
        return 0.5
    if p >= 0.5:
        raise Infeasible("class-1 capacity", "crossover 0.5 leaves zero capacity")

    def f(b):
        return n1 * binary_entropy(b) - n2 * (1.0 - binary_entropy(effective_crossover(p, b)))

    return bisect(f, 0.0, 0.5, xtol=tol, maxiter=500)


def _superposition_payload(sc, rate):
    pr = _class1_crossover(sc, rate)
    n1, n2, L = sc.n1, sc.n2, sc.frame_budget
    beta = solve_beta(n1, n2, pr)
    cap = 1.0 - binary_entropy(pr)
    if n2 == 0:
        share = L * cap / n1
    elif n1 == 0:
        share = L / n2
    else:
        share = L * binary_entropy(beta) / n2
    return rate, beta, share - sc.params.subframe_overhead, cap, pr, ap_duration(L, rate, sc.params)


def _multirate_payload(sc, rate_class1):
    """Time-sharing with the class-2 segment sent at the top PHY rate.

    The frame budget is read as an airtime: the on-air duration of
    ``frame_budget`` bytes at the class-1 rate. Class-2 bytes at the faster
    rate consume proportionally less of it.
    """
    p = sc.params
    r2 = top_rate(p)
    pr = _class1_crossover(sc, rate_class1)
    cap = 1.0 - binary_entropy(pr)
    speedup = p.dbps(r2) / p.dbps(rate_class1)
    x = sc.frame_budget / (sc.n1 / cap + sc.n2 / speedup) - p.subframe_overhead
    return (rate_class1, r2), None, x, cap, pr, ap_duration(sc.frame_budget, rate_class1, p)


def _coded_solution(sc, sized):
    rate_down, beta, x, cap, pr, t_ap = sized
    n1, n2 = sc.n1, sc.n2
    if x < 1.0:
        raise Infeasible("frame budget", f"coded payload {x:.3g} bytes is below one byte")
    # frames are never erased, so every node shares one attempt probability
    state = solve_fixed_point(n1, n2, sc.params)
    x1 = x if n1 else 0.0
    x2 = x if n2 else 0.0
    # class-1 uplink payload is coded for the same channel
    up_air = (x / cap if n1 else 0.0, x2)
    return _finish(sc, rate_down, beta, (x1, x2, x1, x2), (x1, x2, x1, x2), up_air, t_ap, state, pr)


def size_timesharing(sc: Scenario, rate) -> SchemeSolution:
    return _coded_solution(sc, _timesharing_payload(sc, rate))


def size_superposition(sc: Scenario, rate) -> SchemeSolution:
    return _coded_solution(sc, _superposition_payload(sc, rate))


def size_timesharing_multirate(sc: Scenario, rate_class1) -> SchemeSolution:
    if isinstance(rate_class1, tuple):
        rate_class1 = rate_class1[0]
    return _coded_solution(sc, _multirate_payload(sc, rate_class1))


PAYLOADS = {
    Scheme.TIMESHARING: _timesharing_payload,
    Scheme.SUPERPOSITION: _superposition_payload,
    Scheme.TIMESHARING_MULTIRATE: _multirate_payload,
}

SIZERS = {
    Scheme.UNCODED: size_uncoded,
    Scheme.TIMESHARING: size_timesharing,
    Scheme.SUPERPOSITION: size_superposition,
    Scheme.TIMESHARING_MULTIRATE: size_timesharing_multirate,
}


def solve(sc: Scenario, rate) -> SchemeSolution:
    return SIZERS[sc.scheme](sc, rate)


def candidate_rates(sc: Scenario) -> list:
    return sorted(set(sc.params.rate_table) & set(sc.channel.rates))


def optimize_rate(sc: Scenario):
    """Best unicast solution over all PHY rates; ties go to the higher rate.

    Returns ``(best, sweep)`` with ``sweep`` a list of ``(rate, solution or
    None)`` in ascending rate order; infeasible rates map to None.
    """
    sweep = []
    best = None
    for rate in candidate_rates(sc):
        try:
            sol = solve(sc, rate)
        except Infeasible:
            sol = None
        sweep.append((rate, sol))
        if sol is not None and (best is None or sol.network_throughput >= best.network_throughput):
            best = sol
    if best is None:
        raise Infeasible("all rates", f"no feasible PHY rate at class-1 RSSI {sc.rssi_class1}")
    return best, sweep


@dataclass(frozen=True)
class MulticastResult:
    scheme: Scheme
    rate: int | tuple
    beta: float | None
    x1_down: float
    x2_down: float
    e1_down: float
    e2_down: float
    per_station_class1: float
    per_station_class2: float
    total: float
    expected_slot: float


def multicast_throughput(sc: Scenario, rate, scheme=None) -> MulticastResult:
    """Per-station multicast saturation throughput: one flow per class, no uplink,
    the AP alone contending with attempt probability 2 / (W + 1)."""
    scheme = Scheme(scheme or sc.scheme)
    flows = replace(sc, n1=1, n2=1, scheme=scheme, traffic=Traffic.SATURATED_UNICAST)
    p = sc.params
    tau0 = bianchi_tau(0.0, p)
    ap_only = AttemptState(tau0, 0.0, 0.0, 0.0, 0.0, 0.0)
    if scheme is Scheme.UNCODED:
        x1, x2, e1, e2 = _size_uncoded_downlink(flows, rate)
        beta = None
        t_ap = ap_duration(sc.frame_budget, rate, p)
    else:
        if scheme is Scheme.TIMESHARING_MULTIRATE and isinstance(rate, tuple):
            rate = rate[0]
        rate, beta, x, _, _, t_ap = PAYLOADS[scheme](flows, rate)
        if x < 1.0:
            raise Infeasible("frame budget", f"coded payload {x:.3g} bytes is below one byte")
        x1 = x2 = e1 = e2 = x
    timing = slot_timing(ap_only, 0, 0, (t_ap, 0.0, 0.0), p)
    s1 = 8.0 * tau0 * e1 / timing.expected_slot
    s2 = 8.0 * tau0 * e2 / timing.expected_slot
    return MulticastResult(scheme, rate, beta, x1, x2, e1, e2, s1, s2, sc.n1 * s1 + sc.n2 * s2,
                           timing.expected_slot)


def _size_uncoded_downlink(sc, rate):
    """Downlink half of the erasure sizing, without any uplink coupling."""
    p = sc.params
    ov = p.subframe_overhead
    try:
        pu = sc.channel.first_event_error_for(sc.rssi_class1, rate)
    except ChannelError as exc:
        raise Infeasible("class-1 erasure", str(exc)) from None
    keep = 1.0 - pu

    def delivered(x):
        return x * keep ** (8 * (x + ov))

    L = sc.frame_budget
    x1 = bisect(lambda x: (x + ov) + (delivered(x) + ov) - L, 0.0, L - ov, xtol=1e-12, rtol=1e-15, maxiter=500)
    e = delivered(x1)
    if e < 1.0:
        raise Infeasible("downlink fairness", f"equalized payload {e:.3g} bytes is below one byte")
    return x1, e, e, e


def optimize_multicast_rate(sc: Scenario, scheme=None):
    scheme = Scheme(scheme or sc.scheme)
    sweep = []
    best = None
    for rate in candidate_rates(sc):
        try:
            res = multicast_throughput(sc, rate, scheme)
        except Infeasible:
            res = None
        sweep.append((rate, res))
        if res is not None and (best is None or res.total >= best.total):
            best = res
    if best is None:
        raise Infeasible("all rates", f"no feasible multicast PHY rate at class-1 RSSI {sc.rssi_class1}")
    return best, sweep


def downlink_only_per_flow(n_flows: int, frame_bytes: int, rate, params: MacParams = MacParams()) -> float:
    """Per-flow throughput (Mbps) of an error-free, saturated AP that is the only
    contender, splitting each ``frame_bytes`` aggregate evenly over ``n_flows``."""
    tau0 = bianchi_tau(0.0, params)
    x = frame_bytes / n_flows - params.subframe_overhead
    t_ap = ap_duration(frame_bytes, rate, params)
    e_t = (1.0 - tau0) * params.idle_slot_sigma + tau0 * t_ap
    return 8.0 * tau0 * x / e_t
