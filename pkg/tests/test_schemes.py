import math

import pytest

from mdagg.channel import (
    ChannelEntry,
    ChannelTable,
    RATE_TABLE,
    binary_entropy,
    default_channel_table,
    error_free_table,
    frame_erasure_prob,
)
from mdagg.macmodel import AttemptState, MacParams, bianchi_tau
from mdagg.schemes import (
    Infeasible,
    Scenario,
    Scheme,
    Traffic,
    ap_duration,
    multicast_throughput,
    network_throughput,
    optimize_multicast_rate,
    optimize_rate,
    size_superposition,
    size_timesharing,
    size_timesharing_multirate,
    size_uncoded,
    solve_beta,
)

P = MacParams()
CODED = (Scheme.TIMESHARING, Scheme.SUPERPOSITION, Scheme.TIMESHARING_MULTIRATE)
# root of H(b) = 1/2, 40-digit mpmath
BETA_HALF = 0.11002786443835955


def flat_table(p, rates=tuple(RATE_TABLE)):
    """Same crossover at every rate and RSSI, memoryless frame errors."""
    fer = frame_erasure_prob(p, 8640)
    return ChannelTable.from_rows([ChannelEntry(r, rate, p, fer, 8640) for rate in rates for r in (0.0, 50.0)])


def table_with_pu(pu, rate=54):
    fer = frame_erasure_prob(pu, 8640)
    return ChannelTable.from_rows([ChannelEntry(r, rate, pu, fer, 8640) for r in (0.0, 50.0)])


def fair(sol, rel=1e-6):
    s = sol.per_flow_throughputs
    return max(s) - min(s) <= rel * max(s)


def test_uncoded_error_free():
    sol = size_uncoded(Scenario(10, 10, scheme=Scheme.UNCODED, channel=error_free_table()), 54)
    assert sol.x1_down == pytest.approx(380)
    assert sol.x2_down == pytest.approx(380)
    assert sol.x1_up == pytest.approx(380)
    assert fair(sol)


def test_uncoded_single_class():
    sol = size_uncoded(Scenario(8, 0, scheme=Scheme.UNCODED, channel=error_free_table()), 54)
    assert sol.x1_down == pytest.approx(8000 / 8 - 20)


@pytest.mark.parametrize("pu", [1e-6, 1e-5])
def test_uncoded_pads_class1(pu):
    sol = size_uncoded(Scenario(10, 10, scheme=Scheme.UNCODED, channel=table_with_pu(pu)), 54)
    assert sol.x1_down > sol.x2_down
    assert sol.e1_down == pytest.approx(sol.e2_down, rel=1e-9)
    assert fair(sol)


def test_uncoded_hopeless_channel_is_infeasible():
    with pytest.raises(Infeasible):
        size_uncoded(Scenario(10, 10, scheme=Scheme.UNCODED, channel=table_with_pu(5e-3)), 54)


def test_timesharing_error_free_matches_uncoded():
    sc = Scenario(10, 10, channel=error_free_table())
    ts = size_timesharing(sc, 54)
    un = size_uncoded(sc.with_(scheme=Scheme.UNCODED), 54)
    assert ts.x1_down == pytest.approx(380)
    assert ts.network_throughput == pytest.approx(un.network_throughput, rel=1e-12)


def test_timesharing_at_p_011():
    sol = size_timesharing(Scenario(10, 10, channel=flat_table(0.11)), 54)
    c = 1 - binary_entropy(0.11)
    assert 10 * (sol.x1_down + 20) / c + 10 * (sol.x1_down + 20) == pytest.approx(8000)
    assert sol.x1_down == pytest.approx(8000 / (10 / c + 10) - 20, rel=1e-12)
    assert math.floor(sol.x1_down) == 246


def test_timesharing_class2_only():
    sol = size_timesharing(Scenario(0, 10, channel=flat_table(0.2)), 54)
    assert sol.x2_down == pytest.approx(780)


def test_timesharing_zero_capacity():
    with pytest.raises(Infeasible):
        size_timesharing(Scenario(10, 10, channel=flat_table(0.5)), 54)


def test_beta_at_zero_noise():
    b = solve_beta(10, 10, 0.0)
    assert abs(b - 0.1100) < 1e-4
    assert b == pytest.approx(BETA_HALF, abs=1e-9)
    assert 1 - binary_entropy(b) == pytest.approx(0.5, abs=1e-9)
    assert binary_entropy(b) + (1 - binary_entropy(b)) == pytest.approx(1.0)


def test_beta_falls_as_class1_grows():
    betas = [solve_beta(k, 1, 0.05) for k in (1, 2, 4, 8)]
    assert all(b < a for a, b in zip(betas, betas[1:]))


def test_superposition_payload():
    sol = size_superposition(Scenario(10, 10, channel=error_free_table()), 54)
    assert sol.beta == pytest.approx(BETA_HALF, abs=1e-9)
    assert sol.x1_down == pytest.approx(380, abs=1e-6)


def test_multirate_collapses_at_top_rate():
    sc = Scenario(10, 10, channel=flat_table(0.05), scheme=Scheme.TIMESHARING_MULTIRATE)
    mr = size_timesharing_multirate(sc, 54)
    ts = size_timesharing(sc.with_(scheme=Scheme.TIMESHARING), 54)
    assert mr.x1_down == pytest.approx(ts.x1_down)
    assert mr.network_throughput == pytest.approx(ts.network_throughput, rel=1e-12)


def test_multirate_airtime_accounting():
    sc = Scenario(10, 10, channel=error_free_table(), scheme=Scheme.TIMESHARING_MULTIRATE)
    sol = size_timesharing_multirate(sc, 6)
    # a class-2 byte at 54 Mbps costs 1/9 of a class-1 byte at 6 Mbps
    assert sol.x1_down == pytest.approx(8000 / (10 + 10 / 9) - 20)
    assert sol.phy_rate_down == (6, 54)


def test_multirate_class2_only():
    sc = Scenario(0, 10, channel=error_free_table(), scheme=Scheme.TIMESHARING_MULTIRATE)
    sol = size_timesharing_multirate(sc, 54)
    assert sol.x2_down == pytest.approx(780)


def test_network_throughput_examples():
    zero = AttemptState(0, 0, 0, 0, 0, 0)
    assert network_throughput(zero, 5, 5, 100, 100, 100, 100, 9.0) == 0.0
    st = AttemptState(0.1, 0, 0, 0, 0, 0)
    assert network_throughput(st, 1, 1, 600, 400, 0, 0, 200.0) == pytest.approx(4.0)


def test_multicast_ap_only():
    sc = Scenario(10, 10, channel=error_free_table(), traffic=Traffic.MULTICAST)
    res = multicast_throughput(sc, 54, Scheme.TIMESHARING)
    tau0 = bianchi_tau(0.0, P)
    assert tau0 == pytest.approx(2 / 17)
    e_t = (1 - tau0) * P.idle_slot_sigma + tau0 * ap_duration(8000, 54, P)
    assert res.expected_slot == pytest.approx(e_t)
    assert res.per_station_class1 == pytest.approx(8 * tau0 * res.e1_down / e_t)
    assert res.per_station_class1 == pytest.approx(res.per_station_class2)


def test_multicast_schemes_coincide_without_noise():
    sc = Scenario(10, 10, channel=error_free_table(), traffic=Traffic.MULTICAST)
    vals = [multicast_throughput(sc, 54, s).per_station_class1 for s in Scheme]
    assert max(vals) - min(vals) <= 1e-9 * max(vals)


def test_multicast_independent_of_population():
    ch = default_channel_table()
    for scheme in Scheme:
        a, _ = optimize_multicast_rate(Scenario(1, 1, rssi_class1=12, channel=ch), scheme)
        b, _ = optimize_multicast_rate(Scenario(10, 10, rssi_class1=12, channel=ch), scheme)
        assert a.per_station_class1 == pytest.approx(b.per_station_class1, rel=1e-9)
        assert a.per_station_class2 == pytest.approx(b.per_station_class2, rel=1e-9)


def test_best_rate_error_free_is_top():
    for scheme in Scheme:
        best, _ = optimize_rate(Scenario(10, 10, scheme=scheme, channel=error_free_table()))
        assert best.rate_label in ("54", "54+54")


def test_best_rate_forced():
    rows = [ChannelEntry(r, 6, 0.0, 0.0, 8640) for r in (0.0, 50.0)]
    rows += [ChannelEntry(r, rate, 0.5, 1.0, 8640) for rate in RATE_TABLE if rate != 6 for r in (0.0, 50.0)]
    ch = ChannelTable.from_rows(rows)
    for scheme in Scheme:
        best, sweep = optimize_rate(Scenario(10, 10, scheme=scheme, channel=ch))
        assert best.rate_label in ("6", "6+54")
        assert all(s is None for rate, s in sweep if rate != 6)


def test_all_rates_infeasible():
    with pytest.raises(Infeasible):
        optimize_rate(Scenario(10, 10, channel=flat_table(0.5)))


@pytest.mark.parametrize("rssi", range(4, 21, 2))
def test_uncoded_picks_no_faster_rate_than_timesharing(rssi):
    ch = default_channel_table()
    un, _ = optimize_rate(Scenario(10, 10, rssi_class1=rssi, scheme=Scheme.UNCODED, channel=ch))
    ts, _ = optimize_rate(Scenario(10, 10, rssi_class1=rssi, scheme=Scheme.TIMESHARING, channel=ch))
    assert un.phy_rate_down <= ts.phy_rate_down


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("rssi", [0, 6, 12, 18, 24])
@pytest.mark.parametrize("pop", [(1, 1), (10, 10), (3, 7), (12, 2)])
def test_fairness(scheme, rssi, pop):
    try:
        best, sweep = optimize_rate(Scenario(*pop, rssi_class1=rssi, scheme=scheme))
    except Infeasible:
        return
    for _, sol in sweep:
        if sol is not None:
            assert fair(sol)


@pytest.mark.parametrize("rssi", [3, 8, 12, 16])
@pytest.mark.parametrize("pop", [(10, 10), (3, 7), (12, 2)])
def test_budget_conservation(rssi, pop):
    n1, n2 = pop
    sc = Scenario(n1, n2, rssi_class1=rssi)
    for rate in (12, 24, 36):
        try:
            un = size_uncoded(sc.with_(scheme=Scheme.UNCODED), rate)
        except Infeasible:
            un = None
        if un is not None:
            w = un.whole_bytes()
            total = n1 * (w["x1_down"] + 20) + n2 * (w["x2_down"] + 20)
            assert 8000 - (n1 + n2) <= total <= 8000
        try:
            ts = size_timesharing(sc, rate)
        except Infeasible:
            continue
        cap = 1 - binary_entropy(ts.crossover)
        x = ts.whole_bytes()["x1_down"]
        total = n1 * (x + 20) / cap + n2 * (x + 20)
        assert 8000 - (n1 + n2) / cap <= total <= 8000


@pytest.fixture(scope="module")
def sweep():
    ch = default_channel_table()
    out = {}
    for rssi in sorted({e.rssi for e in ch.entries}):
        for scheme in Scheme:
            try:
                out[rssi, scheme] = optimize_rate(Scenario(10, 10, rssi_class1=rssi, scheme=scheme, channel=ch))[0]
            except Infeasible:
                out[rssi, scheme] = None
    return out


def test_dominance(sweep):
    """Time-sharing at its best rate never falls below uncoded at its best rate."""
    bad = []
    for (rssi, scheme), sol in sweep.items():
        if scheme is not Scheme.UNCODED or sol is None or sol.crossover == 0.0 and sol.first_event_error == 0.0:
            continue
        ts = sweep[rssi, Scheme.TIMESHARING]
        if ts.network_throughput < sol.network_throughput:
            bad.append((rssi, ts.network_throughput / sol.network_throughput - 1))
    assert not bad, f"time-sharing below uncoded at {bad}"


def test_timesharing_close_to_superposition(sweep):
    gaps = {}
    for (rssi, scheme), sol in sweep.items():
        if scheme is Scheme.SUPERPOSITION and sol is not None:
            ts = sweep[rssi, Scheme.TIMESHARING]
            gaps[rssi] = abs(sol.network_throughput - ts.network_throughput) / sol.network_throughput
    worst = max(gaps, key=gaps.get)
    assert gaps[worst] <= 0.05, f"gap {gaps[worst]:.4f} at {worst} dBm"


def test_coded_schemes_always_feasible_where_uncoded_is(sweep):
    for (rssi, scheme), sol in sweep.items():
        if scheme is Scheme.UNCODED and sol is not None:
            assert all(sweep[rssi, s] is not None for s in CODED)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_throughput_falls_with_station_count(scheme):
    s = [optimize_rate(Scenario(n // 2, n // 2, rssi_class1=13, scheme=scheme))[0].network_throughput
         for n in (2, 4, 10, 20)]
    assert all(b <= a for a, b in zip(s, s[1:]))


@pytest.mark.parametrize("scheme", list(Scheme))
def test_throughput_rises_with_class2_share(scheme):
    s = [optimize_rate(Scenario(10 - k, k, rssi_class1=12, scheme=scheme))[0].network_throughput
         for k in range(1, 10)]
    assert all(b >= a for a, b in zip(s, s[1:]))


def test_weighted_mode_counts_every_destination():
    sc = Scenario(10, 10, channel=error_free_table())
    lit = size_timesharing(sc, 54)
    wtd = size_timesharing(sc.with_(downlink_weighting="weighted"), 54)
    assert wtd.per_flow_throughputs == pytest.approx(lit.per_flow_throughputs)
    assert wtd.network_throughput > lit.network_throughput


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(0, 0)
    with pytest.raises(ValueError):
        Scenario(10, 10, frame_budget=300)
