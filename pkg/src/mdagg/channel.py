"""Binary symmetric / packet erasure channel maths and measured-channel tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

CSV_COLUMNS = ("rssi_dbm", "phy_rate_mbps", "bsc_crossover", "frame_error_rate", "measured_frame_bits")

# PHY rate (Mbps) -> data bits per OFDM symbol, 802.11a/g
RATE_TABLE = {6: 24, 9: 36, 12: 48, 18: 72, 24: 96, 36: 144, 48: 192, 54: 216}

MEASURED_FRAME_BITS = 8640


class ChannelError(ValueError):
    pass


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ChannelError(f"{name} must lie in [0, 1], got {p!r}")


def binary_entropy(p: float) -> float:
    """H(p) in bits, with H(0) = H(1) = 0."""
    _check_prob("p", p)
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def bsc_capacity(p: float) -> float:
    if p > 0.5:
        raise ChannelError(f"crossover above 0.5 is not normalized: {p!r}")
    return 1.0 - binary_entropy(p)


def effective_crossover(p: float, q: float) -> float:
    """Flip probability of the XOR of two independent Bernoulli(p), Bernoulli(q) bits."""
    _check_prob("p", p)
    _check_prob("q", q)
    return q * (1.0 - p) + (1.0 - q) * p


def first_event_error_from_fer(fer: float, measured_bits: int = MEASURED_FRAME_BITS) -> float:
    """Per-bit error-event probability implied by a frame error rate measured on
    frames of ``measured_bits`` bits."""
    _check_prob("fer", fer)
    if fer >= 1.0:
        raise ChannelError("fer = 1: every frame is erased, channel unusable")
    if measured_bits < 1:
        raise ChannelError("measured_bits must be >= 1")
    # expm1/log1p keep precision for small fer
    return -math.expm1(math.log1p(-fer) / measured_bits)


def frame_erasure_prob(pu: float, frame_bits: float) -> float:
    _check_prob("pu", pu)
    if frame_bits < 0:
        raise ChannelError("frame_bits must be non-negative")
    if pu == 1.0:
        return 1.0 if frame_bits > 0 else 0.0
    return -math.expm1(frame_bits * math.log1p(-pu))


class ChannelEntry(NamedTuple):
    rssi: float
    rate: int
    crossover: float
    fer: float
    frame_bits: int


@dataclass(frozen=True)
class ChannelTable:
    """Measured (or synthetic) channel quality per (RSSI, PHY rate).

    Lookups interpolate linearly in RSSI between rows of the same rate and clamp
    to the nearest row outside the measured range.
    """

    entries: tuple[ChannelEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise ChannelError("channel table is empty")
        seen = set()
        for e in self.entries:
            key = (e.rssi, e.rate)
            if key in seen:
                raise ChannelError(f"duplicate channel row for rssi={e.rssi}, rate={e.rate}")
            seen.add(key)
            if not 0.0 <= e.crossover <= 0.5:
                raise ChannelError(f"crossover {e.crossover} outside [0, 0.5] at {key}")
            _check_prob("frame_error_rate", e.fer)
            if e.frame_bits <= 0:
                raise ChannelError(f"measured_frame_bits must be positive at {key}")
        grid = {}
        for e in sorted(self.entries):
            grid.setdefault(e.rate, []).append(e)
        object.__setattr__(self, "_by_rate", {
            r: {f: np.array([getattr(e, f) for e in rows], dtype=float) for f in ChannelEntry._fields}
            for r, rows in grid.items()
        })

    @property
    def rates(self) -> list[int]:
        return sorted(self._by_rate)

    def _rows(self, rate):
        try:
            return self._by_rate[rate]
        except KeyError:
            raise ChannelError(f"no channel data for rate {rate} Mbps; available: {self.rates}") from None

    def _interp(self, rssi, rate, field):
        cols = self._rows(rate)
        return float(np.interp(rssi, cols["rssi"], cols[field]))

    def crossover_for(self, rssi: float, rate: int) -> float:
        return self._interp(rssi, rate, "crossover")

    def fer_for(self, rssi: float, rate: int) -> float:
        return self._interp(rssi, rate, "fer")

    def first_event_error_for(self, rssi: float, rate: int) -> float:
        """Raises ChannelError when the interpolated FER is 1."""
        cols = self._rows(rate)
        i = int(np.clip(np.searchsorted(cols["rssi"], rssi), 0, len(cols["rssi"]) - 1))
        return first_event_error_from_fer(self.fer_for(rssi, rate), int(cols["frame_bits"][i]))

    @classmethod
    def from_rows(cls, rows: Iterable) -> "ChannelTable":
        return cls(tuple(ChannelEntry(float(r[0]), int(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in rows))

    @classmethod
    def from_csv(cls, source) -> "ChannelTable":
        """Read a channel CSV from a path or an open text stream."""
        if isinstance(source, (str, Path)):
            with open(source, newline="") as fh:
                return cls.from_csv(fh)
        lines = [ln for ln in source if ln.strip() and not ln.lstrip().startswith("#")]
        reader = csv.DictReader(lines)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ChannelError(f"channel CSV missing columns: {sorted(missing)}")
        rows = [[rec[c] for c in CSV_COLUMNS] for rec in reader]
        return cls.from_rows(rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in sorted(self.entries, key=lambda e: (e.rate, e.rssi)):
            w.writerow([f"{e.rssi:g}", e.rate, f"{e.crossover:.6e}", f"{e.fer:.6e}", e.frame_bits])
        return buf.getvalue()


# Synthetic channel shaped like outdoor 802.11 corrupted-frame measurements:
# crossover falls logistically with RSSI; each faster rate needs 3 dB more.
LOGISTIC_SLOPE = 1.2
RATE_OFFSETS_DB = {6: -7.0, 9: -4.0, 12: -1.0, 18: 2.0, 24: 5.0, 36: 8.0, 48: 11.0, 54: 14.0}
SYNTHETIC_RSSI = range(-10, 46)


def synthetic_crossover(rssi: float, rate: int, slope: float = LOGISTIC_SLOPE) -> float:
    return 0.5 / (1.0 + math.exp(slope * (rssi - RATE_OFFSETS_DB[rate])))


def synthetic_fer(rssi: float, rate: int, frame_bits: int = MEASURED_FRAME_BITS) -> float:
    """Frame error rate of a memoryless channel with the synthetic crossover,
    i.e. the same channel the coded schemes are sized for."""
    return frame_erasure_prob(synthetic_crossover(rssi, rate), frame_bits)


def synthetic_channel_table(rssi_values=SYNTHETIC_RSSI, rates=tuple(RATE_TABLE)) -> ChannelTable:
    rows = []
    for rate in rates:
        for rssi in rssi_values:
            # round-trip through the CSV precision so the shipped file and the
            # in-memory table agree exactly
            rows.append((rssi, rate, float(f"{synthetic_crossover(rssi, rate):.6e}"),
                         float(f"{synthetic_fer(rssi, rate):.6e}"), MEASURED_FRAME_BITS))
    return ChannelTable.from_rows(rows)


def default_channel_table() -> ChannelTable:
    with resources.files("mdagg").joinpath("data/synthetic_channel.csv").open("r") as fh:
        return ChannelTable.from_csv(fh)


def error_free_table(rates=tuple(RATE_TABLE), rssi_values=(0, 50)) -> ChannelTable:
    return ChannelTable.from_rows((r, rate, 0.0, 0.0, MEASURED_FRAME_BITS) for rate in rates for r in rssi_values)
