"""802.11 DCF saturation model for an AP plus two client classes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from .channel import RATE_TABLE, frame_erasure_prob

OFDM_SYMBOL_US = 4
SERVICE_TAIL_BITS = 22


class MacModelError(ValueError):
    pass


class FixedPointError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class MacParams:
    """Timing in microseconds, sizes in bytes. Defaults are the 802.11a/g values
    used throughout the toolkit."""

    t_sifs: float = 16
    t_phyhdr: float = 20
    t_phyhdr1: float = 36
    t_ack: float = 24
    t_difs: float = 34
    idle_slot_sigma: float = 9
    l_subhdr: int = 16
    l_fcs: int = 4
    l_machdr: int = 24
    cw_min: int = 16
    cw_max: int = 1024
    retry_limit_m: int = 7
    rate_table: dict = field(default_factory=lambda: dict(RATE_TABLE))

    def __post_init__(self):
        for name in ("t_sifs", "t_phyhdr", "t_phyhdr1", "t_ack", "t_difs", "idle_slot_sigma"):
            if getattr(self, name) < 0:
                raise MacModelError(f"{name} must be non-negative")
        if self.cw_min < 2 or self.cw_max < self.cw_min:
            raise MacModelError("need cw_max >= cw_min >= 2")
        ratio = self.cw_max // self.cw_min
        if ratio * self.cw_min != self.cw_max or ratio & (ratio - 1):
            raise MacModelError("cw_max / cw_min must be a power of two")
        if self.retry_limit_m < 0:
            raise MacModelError("retry_limit_m must be >= 0")

    @property
    def doublings(self) -> int:
        """Number of contention-window doublings from cw_min to cw_max."""
        return int(math.log2(self.cw_max // self.cw_min))

    @property
    def subframe_overhead(self) -> int:
        return self.l_subhdr + self.l_fcs

    def dbps(self, rate) -> int:
        try:
            return self.rate_table[rate]
        except KeyError:
            raise MacModelError(f"unknown PHY rate {rate}; known: {sorted(self.rate_table)}") from None

    @classmethod
    def from_mapping(cls, values: dict) -> "MacParams":
        """Build from ``{name: value}`` with string or numeric values; unknown keys raise."""
        known = {f.name: f for f in fields(cls) if f.name != "rate_table"}
        kwargs = {}
        rate_table = None
        for key, raw in values.items():
            if key == "rate_table":
                # "6:24,9:36,..."
                rate_table = {int(a): int(b) for a, b in (item.split(":") for item in str(raw).split(","))}
                continue
            if key not in known:
                raise MacModelError(f"unknown MAC parameter {key!r}")
            kind = int if known[key].type in ("int", int) else float
            kwargs[key] = kind(raw)
        p = cls(**kwargs)
        return replace(p, rate_table=rate_table) if rate_table else p


@dataclass(frozen=True)
class AttemptState:
    tau0: float
    tau1: float
    tau2: float
    pf0: float
    pf1: float
    pf2: float
    iterations: int = 0
    residual: float = 0.0


@dataclass(frozen=True)
class SlotTiming:
    t_ap: float
    t_class1: float
    t_class2: float
    p_idle: float
    p_ap: float
    p_t1: float
    p_t2: float
    expected_slot: float


def bianchi_tau(pf: float, params: MacParams) -> float:
    """Attempt probability for a station whose transmissions fail with
    probability ``pf``, with a finite retry limit and capped window.

    The closed form has a removable 0/0 at pf = 0.5; dividing through by
    (1 - 2 pf) turns (1 - (2 pf)^(m+1)) / (1 - 2 pf) into a finite geometric
    sum, which is evaluated directly so no limit patching is needed.
    """
    if not 0.0 <= pf < 1.0:
        raise MacModelError(f"pf must lie in [0, 1), got {pf!r}")
    W = params.cw_min
    m = params.retry_limit_m
    mp = params.doublings
    geo = sum((2.0 * pf) ** k for k in range(m + 1))
    tail = 1.0 - pf ** (m + 1)
    den = (1.0 - pf) * W * geo + tail
    if m > mp:
        den += W * 2 ** mp * pf ** (mp + 1) * (1.0 - pf ** (m - mp))
    return 2.0 * tail / den


def failure_probs(tau0, tau1, tau2, n1, n2, pe1_up=0.0):
    """Failure probabilities (AP, class 1, class 2). Class 2 and the AP only
    suffer collisions; class-1 uplink frames are additionally erased by noise."""
    if n1 < 0 or n2 < 0:
        raise MacModelError("station counts must be non-negative")
    pf0 = 1.0 - (1.0 - tau1) ** n1 * (1.0 - tau2) ** n2
    if n1 == 0:
        pf1 = 0.0
    else:
        pc1 = 1.0 - (1.0 - tau1) ** (n1 - 1) * (1.0 - tau2) ** n2 * (1.0 - tau0)
        pf1 = 1.0 - (1.0 - pc1) * (1.0 - pe1_up)
    return pf0, pf1, pf0


def failure_probs_general(taus, frame_bits, pus):
    """Per-node failure probability for an arbitrary population (index 0 = AP)."""
    if not len(taus) == len(frame_bits) == len(pus):
        raise MacModelError("taus, frame_bits and pus must have equal length")
    idle = [1.0 - t for t in taus]
    out = []
    for i in range(len(taus)):
        others = math.prod(idle[:i] + idle[i + 1:])
        pc = 1.0 - others
        pe = frame_erasure_prob(pus[i], frame_bits[i])
        out.append(1.0 - (1.0 - pc) * (1.0 - pe))
    return out


def _residuals(a, b, n1, n2, pe1_up, params):
    pf0, pf1, _ = failure_probs(a, b, a, n1, n2, pe1_up)
    return bianchi_tau(pf0, params), bianchi_tau(pf1, params), pf0, pf1


def _solve_symmetric(n, params, tol):
    """tau = bianchi_tau(1 - (1 - tau)^n) by bisection."""
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid - bianchi_tau(1.0 - (1.0 - mid) ** n, params) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < tol * 1e-3:
            break
    return 0.5 * (lo + hi)


def solve_fixed_point(n1: int, n2: int, params: MacParams, pe1_up: float = 0.0,
                      damping: float = 0.5, tol: float = 1e-10, max_iter: int = 10000,
                      init: AttemptState | None = None) -> AttemptState:
    """Joint attempt/failure probabilities for the AP, ``n1`` class-1 and ``n2``
    class-2 stations, with class-1 uplink erasure probability ``pe1_up``.

    The AP and class-2 stations see identical failure probabilities and so
    share one attempt probability.
    """
    if n1 < 0 or n2 < 0:
        raise MacModelError("station counts must be non-negative")
    if not 0.0 <= pe1_up < 1.0:
        raise MacModelError("pe1_up must lie in [0, 1)")
    if init is not None:
        a, b = init.tau0, init.tau1
    else:
        a = b = bianchi_tau(0.0, params)
    residual = math.inf
    for it in range(1, max_iter + 1):
        na, nb, pf0, pf1 = _residuals(a, b, n1, n2, pe1_up, params)
        residual = max(abs(na - a), abs(nb - b))
        if residual < tol:
            break
        a += damping * (na - a)
        b += damping * (nb - b)
    else:
        if pe1_up == 0.0:
            a = b = _solve_symmetric(n1 + n2, params, tol)
            na, nb, pf0, pf1 = _residuals(a, b, n1, n2, pe1_up, params)
            residual = max(abs(na - a), abs(nb - b))
            if residual < tol:
                return AttemptState(a, b, a, pf0, pf1, pf0, max_iter, residual)
        raise FixedPointError("MAC fixed point did not converge", residual)
    # the loop exits with (a, b) whose own images are within tol; report those
    return AttemptState(a, b, a, pf0, pf1, pf0, it, residual)


def tx_duration(payload_bytes: float, rate, params: MacParams) -> float:
    """On-air duration (us) of a frame carrying ``payload_bytes``, MAC header and FCS included."""
    if payload_bytes < 0:
        raise MacModelError("payload must be non-negative")
    bits = (payload_bytes + params.l_machdr + params.l_fcs) * 8 + SERVICE_TAIL_BITS
    return OFDM_SYMBOL_US * math.ceil(bits / params.dbps(rate))


def frame_overheads(params: MacParams, rate=None, aggregated: bool = False) -> float:
    """DIFS + two PHY headers + SIFS + ACK; aggregated frames carry the longer PHY header."""
    t = params.t_difs + 2 * params.t_phyhdr + params.t_sifs + params.t_ack
    if aggregated:
        t += params.t_phyhdr1 - params.t_phyhdr
    return t


def slot_timing(state: AttemptState, n1: int, n2: int, durations, params: MacParams) -> SlotTiming:
    t_ap, t1, t2 = durations
    present = [t_ap] + ([t1] if n1 else []) + ([t2] if n2 else [])
    if any(x < y - 1e-9 for x, y in zip(present, present[1:])):
        raise MacModelError(f"slot durations must satisfy T_AP >= T1 >= T2, got {durations}")
    tau0, tau1, tau2 = state.tau0, state.tau1, state.tau2
    q1 = (1.0 - tau1) ** n1
    q2 = (1.0 - tau2) ** n2
    p_t1 = (1.0 - q1) * (1.0 - tau0)
    p_t2 = (1.0 - q2) * (1.0 - tau0) * q1
    p_idle = q1 * q2 * (1.0 - tau0)
    e_t = p_idle * params.idle_slot_sigma + tau0 * t_ap + p_t1 * t1 + p_t2 * t2
    return SlotTiming(t_ap, t1, t2, p_idle, tau0, p_t1, p_t2, e_t)
