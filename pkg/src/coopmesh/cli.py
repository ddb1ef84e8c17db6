"""Command-line front end: scenario configs, sweeps, CSV output.

The config file is flat ``key = value`` text grouped into sections; every
key is optional and unknown keys are rejected with their line number. A
sweep fans (protocol, class, axis value, seed) combinations out to worker
processes, writes one CSV row per run plus mean/stddev rows per point, and
prints the headline protocol comparison when the baselines are present.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .coop_relay import RateWeights, RoutingClass
from .forwarding import Protocol
from .sim_engine import MetricsReport, ScenarioConfig, form_network, with_protocol

CSV_COLUMNS = [
    "protocol", "class", "axis", "axis_value", "seed",
    "pdr", "mean_retx", "mean_delay_slots", "mean_delay_ms",
    "sent", "delivered", "dropped",
]

PROTOCOL_TOKENS = {
    "rpl": Protocol.RPL,
    "opp_rpl": Protocol.OPP_RPL,
    "coop_rpl": Protocol.COOP_RPL,
}
CLASS_TOKENS = {
    "a": RoutingClass.CLASS_A,
    "b": RoutingClass.CLASS_B,
    "c": RoutingClass.CLASS_C,
    "best_effort": RoutingClass.BEST_EFFORT,
}


class ConfigError(Exception):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def _to_int(raw, line):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected integer, got {raw!r}", line)


def _to_float(raw, line):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"expected number, got {raw!r}", line)


def _to_probability(raw, line):
    value = _to_float(raw, line)
    if not 0.0 <= value <= 1.0:
        raise ConfigError("probability out of range", line)
    return value


def _to_bool(raw, line):
    if raw.lower() in ("true", "yes", "1"):
        return True
    if raw.lower() in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected true/false, got {raw!r}", line)


def _to_protocol(raw, line):
    token = raw.lower()
    if token not in PROTOCOL_TOKENS:
        raise ConfigError(f"unknown protocol {raw!r}", line)
    return PROTOCOL_TOKENS[token]


def _to_class(raw, line):
    token = raw.lower()
    if token not in CLASS_TOKENS:
        raise ConfigError(f"unknown routing class {raw!r}", line)
    return CLASS_TOKENS[token]


def _to_mapping(raw, line):
    if raw not in ("reference", "uniform"):
        raise ConfigError("lsr_mapping must be 'reference' or 'uniform'", line)
    return raw


def _to_axis(raw, line):
    if raw not in ("lsr", "density"):
        raise ConfigError("sweep axis must be 'lsr' or 'density'", line)
    return raw


def _to_values(raw, line):
    try:
        values = tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {raw!r}", line)
    if not values:
        raise ConfigError("sweep values must be nonempty", line)
    return values


# (section, key) -> (ScenarioConfig field, converter)
_SCHEMA = {
    ("scenario", "seed"): ("seed", _to_int),
    ("scenario", "region_side"): ("region_side", _to_float),
    ("scenario", "intensity"): ("intensity", _to_float),
    ("scenario", "density_ratio"): ("density_ratio", _to_float),
    ("scenario", "protocol"): ("protocol", _to_protocol),
    ("scenario", "routing_class"): ("routing_class", _to_class),
    ("scenario", "p_coop"): ("p_coop", _to_probability),
    ("scenario", "max_retx"): ("max_retx", _to_int),
    ("scenario", "relay_retx"): ("relay_retx", _to_int),
    ("scenario", "retx_wait_slots"): ("retx_wait_slots", _to_int),
    ("scenario", "fset_size"): ("fset_size", _to_int),
    ("scenario", "n_packets"): ("n_packets", _to_int),
    ("scenario", "warmup_slots"): ("warmup_slots", _to_int),
    ("scenario", "traffic_window_slots"): ("traffic_window_slots", _to_int),
    ("scenario", "quiescence_slots"): ("quiescence_slots", _to_int),
    ("scenario", "slot_ms"): ("slot_ms", _to_float),
    ("channel", "tx_power_w"): ("tx_power_w", _to_float),
    ("channel", "path_loss_exponent"): ("path_loss_exponent", _to_float),
    ("channel", "reference_loss_db"): ("reference_loss_db", _to_float),
    ("channel", "noise_floor_w"): ("noise_floor_w", _to_float),
    ("channel", "tx_range_m"): ("tx_range_m", _to_float),
    ("channel", "sinr_threshold_db"): ("sinr_threshold_db", _to_float),
    ("channel", "lsr_value"): ("lsr_value", _to_probability),
    ("channel", "lsr_mapping"): ("lsr_mapping", _to_mapping),
    ("channel", "reference_distance"): ("reference_distance", _to_float),
    ("channel", "sinr_per_slot"): ("sinr_per_slot", _to_bool),
    ("rpl", "etx_max"): ("etx_max", _to_float),
    ("rpl", "hysteresis"): ("hysteresis", _to_float),
    ("rpl", "trickle_imin_ms"): ("trickle_imin_ms", _to_float),
    ("rpl", "trickle_doublings"): ("trickle_doublings", _to_int),
    ("rpl", "trickle_redundancy_k"): ("trickle_redundancy_k", _to_int),
    ("rpl", "dis_timeout_ms"): ("dis_timeout_ms", _to_float),
    ("sweep", "axis"): ("sweep_axis", _to_axis),
    ("sweep", "values"): ("sweep_values", _to_values),
}

_WEIGHT_KEYS = ("w_sinr", "w_traffic", "w_nch", "w_etx")


def parse_scenario_text(text: str) -> ScenarioConfig:
    """Parse config text; see parse_scenario for the file variant."""
    section = None
    fields: dict[str, object] = {}
    weights: dict[str, float] = {}
    weights_line: int | None = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("scenario", "channel", "rpl", "weights", "sweep"):
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if not raw_value:
            continue  # blank value keeps the default
        if section == "weights":
            if key not in _WEIGHT_KEYS:
                raise ConfigError(f"unknown key {key!r} in [weights]", lineno)
            weights[key] = _to_float(raw_value, lineno)
            weights_line = weights_line or lineno
            continue
        schema = _SCHEMA.get((section, key))
        if schema is None:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        attr, converter = schema
        fields[attr] = converter(raw_value, lineno)
    if weights:
        missing = [k for k in _WEIGHT_KEYS if k not in weights]
        if missing:
            raise ConfigError(f"[weights] missing {', '.join(missing)}", weights_line)
        try:
            fields["weights"] = RateWeights(**weights)
        except ValueError as exc:
            raise ConfigError(str(exc), weights_line)
    try:
        return ScenarioConfig(**fields)
    except ValueError as exc:
        raise ConfigError(str(exc))


def parse_scenario(path: str | Path) -> ScenarioConfig:
    """Load a scenario config file; empty file means all defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_scenario_text(path.read_text(encoding="utf-8"))


def render_scenario(config: ScenarioConfig) -> str:
    """Resolved config in the file format; re-parsing it round-trips."""
    protocol_token = config.protocol.value
    class_token = config.routing_class.value
    lines = [
        "[scenario]",
        f"seed = {config.seed}",
        f"region_side = {config.region_side!r}",
        f"intensity = {config.intensity!r}",
        f"density_ratio = {config.density_ratio!r}",
        f"protocol = {protocol_token}",
        f"routing_class = {class_token}",
        f"p_coop = {config.p_coop!r}",
        f"max_retx = {config.max_retx}",
        f"relay_retx = {config.relay_retx}",
        f"retx_wait_slots = {config.retx_wait_slots}",
        f"fset_size = {config.fset_size}",
        f"n_packets = {config.n_packets}",
        f"warmup_slots = {config.warmup_slots}",
        f"traffic_window_slots = {'' if config.traffic_window_slots is None else config.traffic_window_slots}",
        f"quiescence_slots = {config.quiescence_slots}",
        f"slot_ms = {config.slot_ms!r}",
        "",
        "[channel]",
        f"tx_power_w = {config.tx_power_w!r}",
        f"path_loss_exponent = {config.path_loss_exponent!r}",
        f"reference_loss_db = {config.reference_loss_db!r}",
        f"noise_floor_w = {config.noise_floor_w!r}",
        f"tx_range_m = {config.tx_range_m!r}",
        f"sinr_threshold_db = {config.sinr_threshold_db!r}",
        f"lsr_value = {'' if config.lsr_value is None else repr(config.lsr_value)}",
        f"lsr_mapping = {config.lsr_mapping}",
        f"reference_distance = {'' if config.reference_distance is None else repr(config.reference_distance)}",
        f"sinr_per_slot = {'true' if config.sinr_per_slot else 'false'}",
        "",
        "[rpl]",
        f"etx_max = {config.etx_max!r}",
        f"hysteresis = {config.hysteresis!r}",
        f"trickle_imin_ms = {config.trickle_imin_ms!r}",
        f"trickle_doublings = {config.trickle_doublings}",
        f"trickle_redundancy_k = {config.trickle_redundancy_k}",
        f"dis_timeout_ms = {config.dis_timeout_ms!r}",
    ]
    if config.weights is not None:
        w = config.weights
        lines += [
            "",
            "[weights]",
            f"w_sinr = {w.w_sinr!r}",
            f"w_traffic = {w.w_traffic!r}",
            f"w_nch = {w.w_nch!r}",
            f"w_etx = {w.w_etx!r}",
        ]
    if config.sweep_axis is not None:
        lines += [
            "",
            "[sweep]",
            f"axis = {config.sweep_axis}",
            f"values = {', '.join(repr(v) for v in config.sweep_values)}",
        ]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepSpec:
    axis: str  # "lsr" or "density"
    values: tuple[float, ...]
    variants: tuple[tuple[Protocol, RoutingClass], ...]
    seeds: int

    def __post_init__(self):
        if self.axis not in ("lsr", "density"):
            raise ConfigError("sweep axis must be 'lsr' or 'density'")
        if not self.values:
            raise ConfigError("sweep values must be nonempty")
        if list(self.values) != sorted(set(self.values)):
            raise ConfigError("sweep values must be strictly increasing")
        if self.axis == "lsr" and not all(0.0 < v <= 1.0 for v in self.values):
            raise ConfigError("probability out of range")
        if self.axis == "density" and not all(v > 0 for v in self.values):
            raise ConfigError("density ratios must be positive")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")


def default_variants(
    protocols: list[str] | None = None, classes: list[str] | None = None
) -> tuple[tuple[Protocol, RoutingClass], ...]:
    """Expand protocol/class tokens into run variants in canonical order."""
    protocol_list = protocols or ["rpl", "opp_rpl", "coop_rpl"]
    class_list = classes or ["a", "b", "c", "best_effort"]
    variants = []
    for token in protocol_list:
        if token not in PROTOCOL_TOKENS:
            raise ConfigError(f"unknown protocol {token!r}")
        protocol = PROTOCOL_TOKENS[token]
        if protocol is Protocol.COOP_RPL:
            for cls_token in class_list:
                if cls_token not in CLASS_TOKENS:
                    raise ConfigError(f"unknown routing class {cls_token!r}")
                variants.append((protocol, CLASS_TOKENS[cls_token]))
        else:
            variants.append((protocol, RoutingClass.BEST_EFFORT))
    return tuple(variants)


def _variant_config(
    base: ScenarioConfig, spec_axis: str, value: float, seed: int,
    protocol: Protocol, routing_class: RoutingClass,
) -> ScenarioConfig:
    updates = {
        "seed": seed,
        "protocol": protocol,
        "routing_class": routing_class,
        "sweep_axis": None,
        "sweep_values": (),
    }
    if spec_axis == "lsr":
        updates["lsr_value"] = value
    else:
        updates["density_ratio"] = value
    return replace(base, **updates)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _class_token(protocol: Protocol, routing_class: RoutingClass) -> str:
    return routing_class.value if protocol is Protocol.COOP_RPL else "-"


def _sweep_point(args) -> list[dict]:
    """Worker: run every protocol variant on one (axis value, seed) point."""
    base, axis, value, seed, variants = args
    rows = []
    formed = None
    for protocol, routing_class in variants:
        config = _variant_config(base, axis, value, seed, protocol, routing_class)
        row = {
            "protocol": protocol.value,
            "class": _class_token(protocol, routing_class),
            "axis": axis,
            "axis_value": value,
            "seed": seed,
        }
        try:
            if formed is None:
                formed = form_network(config)
            report = with_protocol(formed, config).run_traffic()
            row.update(
                pdr=report.pdr,
                mean_retx=report.mean_retransmissions,
                mean_delay_slots=report.mean_delay_slots,
                mean_delay_ms=report.mean_delay_ms,
                sent=report.packets_sent,
                delivered=report.delivered,
                dropped=report.dropped,
            )
        except Exception as exc:  # point failure must not sink the sweep
            row.update(
                pdr=None, mean_retx=None, mean_delay_slots=None,
                mean_delay_ms=None, sent=None, delivered=None, dropped=None,
                error=str(exc),
            )
        rows.append(row)
    return rows


def run_sweep(
    config: ScenarioConfig,
    spec: SweepSpec,
    out_path: str | Path,
    workers: int = 1,
) -> tuple[list[dict], int]:
    """Run the sweep, write the CSV, return (data rows, failed point count).

    Rows are ordered by (axis value, variant, seed); aggregate rows (seed
    column 'mean' / 'stddev', population stddev) follow the data rows.
    """
    tasks = [
        (config, spec.axis, value, seed, spec.variants)
        for value in spec.values
        for seed in range(1, spec.seeds + 1)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(task) for task in tasks]
    rows = [row for point in results for row in point]
    variant_order = {
        (p.value, _class_token(p, c)): i for i, (p, c) in enumerate(spec.variants)
    }
    rows.sort(
        key=lambda r: (
            spec.values.index(r["axis_value"]),
            variant_order[(r["protocol"], r["class"])],
            r["seed"],
        )
    )
    failed = sum(1 for r in rows if r.get("error") is not None)

    aggregates = []
    for value in spec.values:
        for protocol, routing_class in spec.variants:
            token = (protocol.value, _class_token(protocol, routing_class))
            group = [
                r for r in rows
                if (r["protocol"], r["class"]) == token
                and r["axis_value"] == value
                and r.get("error") is None
            ]
            if not group:
                continue
            for stat_name, fn in (("mean", statistics.fmean), ("stddev", statistics.pstdev)):
                agg = {
                    "protocol": token[0],
                    "class": token[1],
                    "axis": spec.axis,
                    "axis_value": value,
                    "seed": stat_name,
                }
                for column in ("pdr", "mean_retx", "mean_delay_slots",
                               "mean_delay_ms", "sent", "delivered", "dropped"):
                    samples = [r[column] for r in group if r[column] is not None]
                    agg[column] = fn(samples) if samples else None
                aggregates.append(agg)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for row in rows + aggregates:
            writer.writerow([_fmt(row.get(column)) for column in CSV_COLUMNS])
    return rows, failed


def read_sweep_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def emit_comparison(csv_path: str | Path, out=None) -> dict:
    """Print max-over-sweep deltas of each cooperative class against the
    baselines; returns them keyed by class token."""
    out = out if out is not None else sys.stdout
    rows = read_sweep_csv(csv_path)
    means = [r for r in rows if r["seed"] == "mean"]

    def series(protocol, cls):
        return {
            float(r["axis_value"]): r
            for r in means
            if r["protocol"] == protocol and r["class"] == cls
        }

    rpl = series("rpl", "-")
    opp = series("opp_rpl", "-")
    if not rpl:
        raise ValueError("comparison needs rpl baseline rows")
    coop_classes = sorted({r["class"] for r in means if r["protocol"] == "coop_rpl"})
    if not coop_classes:
        raise ValueError("comparison needs at least one coop_rpl variant")
    results = {}
    print("max-over-sweep comparison (mean rows)", file=out)
    header = f"{'class':<14}{'dPDR vs RPL':>14}{'dPDR vs OppRPL':>17}{'delay cut vs RPL':>19}"
    print(header, file=out)
    for cls in coop_classes:
        coop = series("coop_rpl", cls)
        shared = sorted(set(coop) & set(rpl))
        dpdr_rpl = max(
            (float(coop[v]["pdr"]) - float(rpl[v]["pdr"])) * 100.0 for v in shared
        )
        if opp:
            shared_opp = sorted(set(coop) & set(opp))
            dpdr_opp = max(
                (float(coop[v]["pdr"]) - float(opp[v]["pdr"])) * 100.0
                for v in shared_opp
            )
        else:
            dpdr_opp = None
        delay_cuts = []
        for v in shared:
            c, r = coop[v]["mean_delay_slots"], rpl[v]["mean_delay_slots"]
            if c and r and float(r) > 0:
                delay_cuts.append((float(r) - float(c)) / float(r) * 100.0)
        delay_cut = max(delay_cuts) if delay_cuts else None
        results[cls] = {
            "dpdr_vs_rpl_points": dpdr_rpl,
            "dpdr_vs_opp_points": dpdr_opp,
            "delay_reduction_vs_rpl_pct": delay_cut,
        }
        opp_txt = "" if dpdr_opp is None else f"{dpdr_opp:+.1f} pts"
        delay_txt = "" if delay_cut is None else f"{delay_cut:.1f}%"
        print(
            f"{cls:<14}{dpdr_rpl:>+12.1f} pts{opp_txt:>17}{delay_txt:>19}",
            file=out,
        )
    return results


def _report_lines(report: MetricsReport) -> list[str]:
    return [
        f"packets_sent = {report.packets_sent}",
        f"delivered = {report.delivered}",
        f"dropped = {report.dropped}",
        f"pdr = {report.pdr:.4f}",
        f"mean_retransmissions = {report.mean_retransmissions:.4f}",
        f"mean_delay_slots = {_fmt(report.mean_delay_slots)}",
        f"mean_delay_ms = {_fmt(report.mean_delay_ms)}",
        f"joined_nodes = {report.joined_nodes}/{report.total_nodes}"
        + (" (disconnected)" if report.disconnected else ""),
        f"formation_slots = {report.formation_slots}",
    ]


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopmesh",
        description=(
            "Deterministic smart-meter mesh routing simulator: standard, "
            "opportunistic, and cooperative relaying over a gateway-rooted DAG."
        ),
        epilog=(
            "Defaults: 300 m square region, ~80 meters, 50 m range, 1000 "
            "packets, slot 10 ms, trickle 100 ms, retry budget 3, relay "
            "retry 1, forwarding set 3, cooperation probability 1.0. The "
            "LSR axis calibrates the detection threshold so a reference "
            "link (0.7x range) matches the swept value; pass "
            "lsr_mapping=uniform for one shared probability on every link."
        ),
    )
    parser.add_argument("--config", type=Path, help="scenario config file")
    parser.add_argument("--sweep", choices=["lsr", "density"], help="sweep axis")
    parser.add_argument("--values", help="comma-separated sweep values")
    parser.add_argument("--protocols", help="comma list: rpl,opp_rpl,coop_rpl")
    parser.add_argument("--classes", help="comma list: a,b,c,best_effort")
    parser.add_argument("--seeds", type=int, default=20, help="seeds per point")
    parser.add_argument("--out", type=Path, help="CSV output path")
    parser.add_argument("--trace", type=Path, help="JSON-lines trace (single run)")
    parser.add_argument("--workers", type=int, default=1, help="parallel workers")
    parser.add_argument(
        "--quiet", action="store_true", help="skip echoing the resolved config"
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    try:
        config = parse_scenario(args.config) if args.config else ScenarioConfig()
        axis = args.sweep or config.sweep_axis
        if args.values and not axis:
            raise ConfigError("--values needs --sweep (or a [sweep] section)")
        if not args.quiet:
            sys.stdout.write(render_scenario(config))
            sys.stdout.write("\n")
        if axis is None:
            # single run
            trace_sink = [] if args.trace else None
            report = form_network(config, trace_sink).run_traffic()
            for line in _report_lines(report):
                print(line)
            if args.trace:
                with args.trace.open("w", encoding="utf-8") as handle:
                    for record in trace_sink:
                        handle.write(json.dumps(record) + "\n")
            return 0
        values = (
            _to_values(args.values, None) if args.values else tuple(config.sweep_values)
        )
        protocols = args.protocols.split(",") if args.protocols else None
        classes = args.classes.split(",") if args.classes else None
        spec = SweepSpec(
            axis=axis,
            values=values,
            variants=default_variants(protocols, classes),
            seeds=args.seeds,
        )
        out_path = args.out or Path("sweep.csv")
        rows, failed = run_sweep(config, spec, out_path, workers=max(1, args.workers))
        print(f"wrote {out_path} ({len(rows)} data rows, {failed} failed)")
        has_rpl = any(r["protocol"] == "rpl" for r in rows)
        has_coop = any(r["protocol"] == "coop_rpl" for r in rows)
        if has_rpl and has_coop:
            emit_comparison(out_path)
        return 2 if failed else 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
