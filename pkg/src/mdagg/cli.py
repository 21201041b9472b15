"""``mdagg`` command line: analytical sweeps, multicast, simulation and codec demos.

Exit status: 0 on success, 1 on usage or config errors, 2 when the scenario is
infeasible everywhere.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .channel import binary_entropy, effective_crossover
from .config import ConfigError, channel_from, load, parse_range, scenario_from, sim_from
from .framing import (
    FrameFormat,
    IdealCode,
    Layer,
    build_frame,
    corrupt_frame,
    layer_capacity,
    nested_decode,
    parse_frame,
    superpose_layers,
    transmit_bsc,
)
from .schemes import Infeasible, Scheme, optimize_multicast_rate, optimize_rate
from .simulator import run

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2

ANALYZE_COLUMNS = ("rssi", "scheme", "status", "best_rate", "S", "x1D", "x2D", "beta", "gain_vs_uncoded")
PER_RATE_COLUMNS = ("rssi", "rate", "scheme", "status", "S", "x1D", "x2D", "beta")
MULTICAST_COLUMNS = ("frame_size", "rssi", "scheme", "status", "best_rate", "S1", "S2", "total", "gain_vs_uncoded")
CODEC_COLUMNS = ("receiver", "layer", "crossover", "code_rate", "threshold", "status")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def manifest(command, args) -> dict:
    # timestamps come from SOURCE_DATE_EPOCH so reruns stay byte-identical
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return {
        "command": command,
        "config_path": args.config,
        "seed": args.seed,
        "output_path": args.out,
        "toolkit_version": __version__,
        "timestamp": datetime.fromtimestamp(epoch, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
    }


def _num(x, fmt=".6f"):
    if x is None:
        return ""
    return format(x, fmt) if isinstance(x, float) else str(x)


def render(man: dict, columns, rows, fmt: str, extra: dict | None = None) -> str:
    if fmt == "json":
        doc = {"manifest": man, **(extra or {}), "rows": [dict(zip(columns, r)) for r in rows]}
        return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"
    buf = io.StringIO()
    buf.write("# manifest: " + json.dumps(man, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_num(v) for v in r])
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _schemes(cfg) -> list:
    raw = cfg["sweep"].get("schemes")
    try:
        chosen = [Scheme(s.strip()) for s in raw.split(",")] if raw else list(Scheme)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return sorted(set(chosen), key=lambda s: s.value)


def _rssi_values(cfg, args, channel) -> list:
    if args.rssi is not None:
        return parse_range(args.rssi)
    if "rssi" in cfg["sweep"]:
        return parse_range(cfg["sweep"]["rssi"])
    # default: the table's full RSSI span
    rssi = sorted({e.rssi for e in channel.entries})
    return [int(r) if float(r).is_integer() else r for r in rssi]


def cmd_analyze(args, cfg) -> tuple:
    channel = channel_from(cfg)
    base = scenario_from(cfg, channel)
    rows, feasible = [], 0
    for rssi in _rssi_values(cfg, args, channel):
        results = {}
        for scheme in _schemes(cfg):
            sc = base.with_(rssi_class1=rssi, scheme=scheme)
            try:
                best, sweep = optimize_rate(sc)
                results[scheme] = (best, sweep, None)
            except Infeasible as exc:
                results[scheme] = (None, [], exc.constraint)
        feasible += sum(1 for best, _, _ in results.values() if best is not None)
        unc = results.get(Scheme.UNCODED, (None,))[0]
        for scheme, (best, sweep, why) in results.items():
            if args.per_rate:
                for rate, sol in sweep:
                    rows.append(_rate_row(rssi, rate, scheme, sol))
                continue
            if best is None:
                rows.append((rssi, scheme.value, f"infeasible:{why}", None, None, None, None, None, None))
                continue
            gain = None
            if unc is not None and scheme is not Scheme.UNCODED and unc.network_throughput > 0:
                gain = best.network_throughput / unc.network_throughput - 1.0
            rows.append((rssi, scheme.value, "ok", best.rate_label, best.network_throughput,
                         best.x1_down, best.x2_down, best.beta, gain))
    cols = PER_RATE_COLUMNS if args.per_rate else ANALYZE_COLUMNS
    return cols, rows, feasible


def _rate_row(rssi, rate, scheme, sol):
    if sol is None:
        return (rssi, rate, scheme.value, "infeasible", None, None, None, None)
    return (rssi, sol.rate_label, scheme.value, "ok", sol.network_throughput, sol.x1_down, sol.x2_down, sol.beta)


def cmd_multicast(args, cfg) -> tuple:
    channel = channel_from(cfg)
    base = scenario_from(cfg, channel)
    sizes = [int(v) for v in parse_range(cfg["multicast"].get("frame_sizes", "8000,65536"))]
    rows, feasible = [], 0
    for L in sizes:
        for rssi in _rssi_values(cfg, args, channel):
            results = {}
            for scheme in _schemes(cfg):
                try:
                    best, _ = optimize_multicast_rate(base.with_(rssi_class1=rssi, frame_budget=L), scheme)
                    results[scheme] = (best, None)
                except Infeasible as exc:
                    results[scheme] = (None, exc.constraint)
            unc = results.get(Scheme.UNCODED, (None,))[0]
            for scheme, (best, why) in results.items():
                if best is None:
                    rows.append((L, rssi, scheme.value, f"infeasible:{why}", None, None, None, None, None))
                    continue
                feasible += 1
                gain = None
                if unc is not None and scheme is not Scheme.UNCODED and unc.total > 0:
                    gain = best.total / unc.total - 1.0
                label = f"{best.rate[0]}+{best.rate[1]}" if isinstance(best.rate, tuple) else str(best.rate)
                rows.append((L, rssi, scheme.value, "ok", label, best.per_station_class1,
                             best.per_station_class2, best.total, gain))
    return MULTICAST_COLUMNS, rows, feasible


def cmd_simulate(args, cfg):
    sim = sim_from(cfg, args.seed)
    if args.timeseries:
        with open(args.timeseries, "w", newline="") as ts:
            metrics = run(sim, ts)
    else:
        metrics = run(sim)
    return sim, metrics


def _sim_config_dict(sim) -> dict:
    d = {k: getattr(sim, k) for k in sim.__dataclass_fields__ if k not in ("channel", "params")}
    d = {k: (v.value if hasattr(v, "value") else v) for k, v in d.items()}
    d["phy_rate_map"] = {str(k): v for k, v in sim.phy_rate_map.items()}
    d["rssi_map"] = {str(k): v for k, v in sim.rssi_map.items()}
    d["channel"] = "table" if sim.channel is not None else "error-free"
    return d


def cmd_codec_demo(args, cfg) -> list:
    """Rows of (receiver, layer, crossover, code_rate, threshold, status)."""
    c = cfg["codec"]
    try:
        mode = c.get("mode", "timesharing")
        p = float(c.get("crossover", "0.05"))
        nbytes = int(c.get("payload_bytes", "64"))
        scale = float(c.get("rate_scale", "1.0"))
        margin = float(c.get("margin", "0.05"))
        beta = float(c.get("beta", "0.11"))
        block = int(c.get("block_bits", "4096"))
        fixed_rate = float(c["code_rate"]) if "code_rate" in c else None
    except ValueError as exc:
        raise ConfigError(f"bad codec value: {exc}") from None
    if not 0.0 <= p <= 0.5:
        raise ConfigError("codec.crossover must lie in [0, 0.5]")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    code = IdealCode(seed, margin)
    rows = []
    if mode in ("timesharing", "erasure"):
        payloads = [rng.integers(0, 256, nbytes, dtype=np.uint8).tobytes() for _ in range(2)]
        cap = 1.0 - binary_entropy(p)
        rate = fixed_rate if fixed_rate is not None else cap * (1.0 - margin) * scale
        rate = min(rate, 1.0)
        fmt = FrameFormat.TIMESHARING if mode == "timesharing" else FrameFormat.ERASURE
        frame = build_frame([(1, payloads[0]), (2, payloads[1])], fmt, {1: rate}, code).to_bytes()
        for sid, ps in ((1, p), (2, 0.0)):
            heard = corrupt_frame(frame, ps, seed + sid)
            res = parse_frame(heard, sid, fmt, rate if (sid == 1 and fmt is FrameFormat.TIMESHARING) else None,
                              code, ps)
            coded = sid == 1 and fmt is FrameFormat.TIMESHARING
            status = res.status if res.payload in (None, payloads[sid - 1]) else "wrong-payload"
            rows.append((sid, sid, ps, rate if coded else 1.0,
                         (1.0 - binary_entropy(ps)) * (1.0 - margin) if coded else None, status))
        return rows
    if mode != "superposition":
        raise ConfigError(f"codec.mode must be timesharing, erasure or superposition, not {mode!r}")
    # layer 1 (uniform) serves the noisy receiver, layer 2 (density beta) the clean one
    caps = (1.0 - binary_entropy(effective_crossover(p, beta)), binary_entropy(beta))
    infos = []
    layers = []
    for sid, (cap_i, cross, dens) in enumerate(((caps[0], p, 0.5), (caps[1], 0.0, beta)), start=1):
        r = fixed_rate if sid == 1 and fixed_rate is not None else cap_i * (1.0 - margin) * scale
        k = max(1, int(min(r, 1.0) * block / 8))
        infos.append(rng.integers(0, 256, k, dtype=np.uint8).tobytes())
        layers.append(Layer(sid, 8 * k / block, cross, dens))
    word = superpose_layers(infos, layers, code)
    for lay in layers:
        heard = transmit_bsc(word, lay.crossover, seed + lay.station_id)
        results = nested_decode(heard, layers, code, receiver_id=lay.station_id)
        for j, res in enumerate(results):
            s = 0.0
            for upper in layers[j + 1:]:
                s = effective_crossover(s, upper.density)
            thr = layer_capacity(layers[j].density, lay.crossover, s) * (1.0 - margin)
            status = res.status if res.payload in (None, infos[j]) else "wrong-payload"
            rows.append((lay.station_id, res.station_id, lay.crossover, layers[j].code_rate, thr, status))
    return rows


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat section.key = value config file")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--seed", type=int, help="random seed (simulate, codec-demo)")
    common.add_argument("--format", choices=("csv", "json"), help="output format")
    p = _Parser(prog="mdagg", description="Multi-destination aggregation and BSBC coding toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    a = sub.add_parser("analyze", parents=[common], help="best rate and throughput per scheme over an RSSI sweep")
    a.add_argument("--rssi", help="class-1 RSSI sweep start:stop:step or a,b,c (inclusive)")
    a.add_argument("--per-rate", action="store_true", help="one row per PHY rate instead of the optimum")
    m = sub.add_parser("multicast", parents=[common], help="multicast per-station throughput sweep")
    m.add_argument("--rssi", help="class-1 RSSI sweep start:stop:step or a,b,c (inclusive)")
    s = sub.add_parser("simulate", parents=[common], help="run the slot-level simulator")
    s.add_argument("--timeseries", help="write per-frame queue/aggregation CSV here")
    sub.add_parser("codec-demo", parents=[common], help="encode, corrupt and decode one aggregate")
    return p


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.per_rate = getattr(args, "per_rate", False)
    args.rssi = getattr(args, "rssi", None)
    try:
        cfg = load(args.config)
        man = manifest(args.command, args)
        if args.command in ("analyze", "multicast"):
            fn = cmd_analyze if args.command == "analyze" else cmd_multicast
            cols, rows, feasible = fn(args, cfg)
            _emit(render(man, cols, rows, args.format or "csv"), args.out)
            if rows and not feasible:
                print("mdagg: scenario infeasible at every point of the sweep", file=sys.stderr)
                return EXIT_INFEASIBLE
            return EXIT_OK
        if args.command == "simulate":
            sim, metrics = cmd_simulate(args, cfg)
            if (args.format or "json") == "json":
                doc = {"manifest": man, "config": _sim_config_dict(sim), "metrics": metrics.to_dict()}
                _emit(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n", args.out)
            else:
                cols = tuple(metrics.per_flow_detail[0]) if metrics.per_flow_detail else ("flow",)
                rows = [tuple(d.values()) for d in metrics.per_flow_detail]
                _emit(render(man, cols, rows, "csv"), args.out)
            return EXIT_OK
        rows = cmd_codec_demo(args, cfg)
        _emit(render(man, CODEC_COLUMNS, rows, args.format or "csv"), args.out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"mdagg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Infeasible as exc:
        print(f"mdagg: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
