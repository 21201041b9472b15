"""Flat ``section.key = value`` config files.

Example::

    # scenario for the unicast sweep
    scenario.n1 = 10
    scenario.n2 = 10
    channel.table = synthetic
    sweep.rssi = 0:30:1

Lines starting with ``#`` or ``;`` are comments. Keys are case-sensitive.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .channel import ChannelTable, default_channel_table, error_free_table
from .macmodel import MacParams
from .schemes import Scenario, Scheme, Traffic
from .simulator import SimConfig

SECTIONS = ("scenario", "mac", "channel", "sweep", "multicast", "sim", "codec")


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> dict:
    """``{section: {key: raw string}}`` from flat prefixed key-value text."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[_]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    out = {s: {} for s in SECTIONS}
    for key, value in cp["_"].items():
        section, dot, name = key.partition(".")
        if not dot or section not in out or not name:
            raise ConfigError(f"key {key!r} must look like <section>.<name> with section in {SECTIONS}")
        out[section][name] = value.strip()
    return out


def load(path) -> dict:
    if path is None:
        return parse_text("")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text)


def _bool(raw):
    v = str(raw).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _int_map(raw, cast=int):
    """``"1:18,2:54"`` -> {1: 18, 2: 54}."""
    try:
        return {int(a): cast(b) for a, b in (item.split(":") for item in raw.split(","))}
    except ValueError:
        raise ConfigError(f"expected k:v,k:v mapping, got {raw!r}") from None


def parse_range(raw: str) -> list:
    """``"start:stop:step"`` inclusive of stop, or a comma list; empty string gives []."""
    raw = raw.strip()
    if not raw:
        return []
    try:
        if ":" in raw:
            parts = [float(x) for x in raw.split(":")]
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1.0
            if step <= 0:
                raise ConfigError("range step must be positive")
            n = int((stop - start) / step + 1e-9) + 1
            vals = [start + i * step for i in range(max(n, 0))]
        else:
            vals = [float(x) for x in raw.split(",")]
    except ValueError:
        raise ConfigError(f"bad range {raw!r}") from None
    return [int(v) if float(v).is_integer() else v for v in vals]


def channel_from(cfg: dict) -> ChannelTable:
    spec = cfg["channel"].get("table", "synthetic")
    if spec == "synthetic":
        return default_channel_table()
    if spec in ("error-free", "error_free"):
        return error_free_table()
    try:
        return ChannelTable.from_csv(spec)
    except OSError as exc:
        raise ConfigError(f"cannot read channel table {spec}: {exc}") from None


def mac_from(cfg: dict) -> MacParams:
    try:
        return MacParams.from_mapping(cfg["mac"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def scenario_from(cfg: dict, channel: ChannelTable | None = None) -> Scenario:
    s = dict(cfg["scenario"])
    kw = {}
    try:
        for key in ("n1", "n2", "frame_budget"):
            if key in s:
                kw[key] = int(s.pop(key))
        for key in ("rssi_class1", "rssi_class2"):
            if key in s:
                kw[key] = float(s.pop(key))
        if "scheme" in s:
            kw["scheme"] = Scheme(s.pop("scheme"))
        if "traffic" in s:
            kw["traffic"] = Traffic(s.pop("traffic"))
        if "downlink_weighting" in s:
            kw["downlink_weighting"] = s.pop("downlink_weighting")
    except ValueError as exc:
        raise ConfigError(f"bad scenario value: {exc}") from None
    if s:
        raise ConfigError(f"unknown scenario keys: {sorted(s)}")
    kw.setdefault("n1", 10)
    kw.setdefault("n2", 10)
    try:
        return Scenario(params=mac_from(cfg), channel=channel or channel_from(cfg), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


_SIM_INT = ("n_stations", "packet_size", "ip_header", "queue_capacity", "max_agg_frame", "n_class1", "seed")
_SIM_FLOAT = ("arrival_rate", "margin", "sim_duration", "code_rate")
_SIM_STR = ("arrival", "aggregation", "coding")
_SIM_BOOL = ("rts_cts", "uplink_enabled")


def sim_from(cfg: dict, seed: int | None = None) -> SimConfig:
    s = dict(cfg["sim"])
    kw = {}
    try:
        for key in _SIM_INT:
            if key in s:
                kw[key] = int(s.pop(key))
        for key in _SIM_FLOAT:
            if key in s:
                kw[key] = float(s.pop(key))
        for key in _SIM_STR:
            if key in s:
                kw[key] = s.pop(key)
        for key in _SIM_BOOL:
            if key in s:
                kw[key] = _bool(s.pop(key))
        if "phy_rate_map" in s:
            kw["phy_rate_map"] = _int_map(s.pop("phy_rate_map"))
        if "rssi_map" in s:
            kw["rssi_map"] = _int_map(s.pop("rssi_map"), float)
    except ValueError as exc:
        raise ConfigError(f"bad sim value: {exc}") from None
    if s:
        raise ConfigError(f"unknown sim keys: {sorted(s)}")
    if seed is not None:
        kw["seed"] = seed
    # the simulated channel is error-free unless a table is named
    if "table" in cfg["channel"]:
        kw["channel"] = channel_from(cfg)
    try:
        return SimConfig(params=mac_from(cfg), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
