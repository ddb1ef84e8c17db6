import io

import pytest

from coopmesh.cli import (
    ConfigError,
    SweepSpec,
    default_variants,
    emit_comparison,
    main,
    parse_scenario,
    parse_scenario_text,
    read_sweep_csv,
    render_scenario,
    run_sweep,
)
from coopmesh.coop_relay import RoutingClass
from coopmesh.forwarding import Protocol
from coopmesh.sim_engine import ScenarioConfig


def test_empty_config_gives_all_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    assert parse_scenario(path) == ScenarioConfig()


def test_missing_config_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_scenario(tmp_path / "nope.cfg")


def test_parse_basic_fields():
    cfg = parse_scenario_text(
        """
        [scenario]
        seed = 7
        protocol = coop_rpl
        routing_class = a
        n_packets = 123

        [channel]
        lsr_value = 0.7
        tx_range_m = 60
        """
    )
    assert cfg.seed == 7
    assert cfg.protocol is Protocol.COOP_RPL
    assert cfg.routing_class is RoutingClass.CLASS_A
    assert cfg.n_packets == 123
    assert cfg.lsr_value == 0.7
    assert cfg.tx_range_m == 60.0


def test_unknown_key_rejected_with_line_number():
    text = "[scenario]\nseed = 1\nbogus_key = 2\n"
    with pytest.raises(ConfigError, match="line 3.*bogus_key"):
        parse_scenario_text(text)


def test_malformed_value_names_the_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_scenario_text("[scenario]\nseed = banana\n")


def test_weights_must_sum_to_one_with_line_number():
    text = (
        "[weights]\n"
        "w_sinr = 0.5\n"
        "w_traffic = 0.5\n"
        "w_nch = 0.5\n"
        "w_etx = 0.5\n"
    )
    with pytest.raises(ConfigError, match="line 2.*sum to 1"):
        parse_scenario_text(text)


def test_partial_weights_rejected():
    with pytest.raises(ConfigError, match="missing"):
        parse_scenario_text("[weights]\nw_sinr = 1.0\n")


def test_lsr_out_of_range_diagnostic():
    with pytest.raises(ConfigError, match="line 2.*probability out of range"):
        parse_scenario_text("[channel]\nlsr_value = 1.3\n")


def test_comments_and_blank_values_are_ignored():
    cfg = parse_scenario_text(
        "[scenario]  # section\nseed = 9  # trailing comment\nn_packets = \n"
    )
    assert cfg.seed == 9
    assert cfg.n_packets == ScenarioConfig().n_packets


def test_render_round_trips():
    for cfg in (
        ScenarioConfig(),
        ScenarioConfig(
            seed=42,
            protocol=Protocol.COOP_RPL,
            routing_class=RoutingClass.CLASS_C,
            lsr_value=0.65,
            reference_distance=33.0,
            sweep_axis="lsr",
            sweep_values=(0.5, 0.7),
            traffic_window_slots=512,
        ),
    ):
        assert parse_scenario_text(render_scenario(cfg)) == cfg


def test_default_variants_expand_coop_classes():
    variants = default_variants()
    assert variants[0] == (Protocol.RPL, RoutingClass.BEST_EFFORT)
    assert variants[1] == (Protocol.OPP_RPL, RoutingClass.BEST_EFFORT)
    coop = [v for v in variants if v[0] is Protocol.COOP_RPL]
    assert [c.value for _, c in coop] == ["a", "b", "c", "best_effort"]
    assert len(variants) == 6


def test_sweep_spec_validation():
    variants = default_variants(["rpl"])
    with pytest.raises(ConfigError, match="strictly increasing"):
        SweepSpec("lsr", (0.7, 0.5), variants, 1)
    with pytest.raises(ConfigError, match="probability"):
        SweepSpec("lsr", (0.5, 1.2), variants, 1)
    with pytest.raises(ConfigError, match="positive"):
        SweepSpec("density", (-1.0,), variants, 1)
    with pytest.raises(ConfigError, match="seeds"):
        SweepSpec("lsr", (0.5,), variants, 0)


SMALL = ScenarioConfig(region_side=80.0, intensity=10.0 / 6400.0, n_packets=60)


def test_run_sweep_row_counts_and_schema(tmp_path):
    out = tmp_path / "sweep.csv"
    spec = SweepSpec("lsr", (0.6,), default_variants(["rpl"]), seeds=1)
    rows, failed = run_sweep(SMALL, spec, out)
    assert failed == 0
    assert len(rows) == 1
    parsed = read_sweep_csv(out)
    assert len(parsed) == 3  # 1 data row + mean + stddev
    assert list(parsed[0].keys()) == [
        "protocol", "class", "axis", "axis_value", "seed",
        "pdr", "mean_retx", "mean_delay_slots", "mean_delay_ms",
        "sent", "delivered", "dropped",
    ]
    assert {r["seed"] for r in parsed} == {"1", "mean", "stddev"}


def test_run_sweep_full_matrix_row_count(tmp_path):
    out = tmp_path / "matrix.csv"
    spec = SweepSpec("lsr", (0.5, 0.9), default_variants(), seeds=2)
    rows, failed = run_sweep(SMALL, spec, out)
    assert failed == 0
    assert len(rows) == 2 * 6 * 2  # values x variants x seeds
    parsed = read_sweep_csv(out)
    assert len(parsed) == 24 + 2 * 6 * 2  # data + mean/stddev per (value, variant)


def test_run_sweep_deterministic_csv_bytes(tmp_path):
    spec = SweepSpec("lsr", (0.7,), default_variants(["rpl", "coop_rpl"], ["b"]), seeds=2)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run_sweep(SMALL, spec, a, workers=1)
    run_sweep(SMALL, spec, b, workers=2)
    assert a.read_bytes() == b.read_bytes()


def test_run_sweep_density_axis(tmp_path):
    out = tmp_path / "density.csv"
    spec = SweepSpec("density", (0.8, 1.2), default_variants(["rpl"]), seeds=1)
    rows, failed = run_sweep(SMALL, spec, out)
    assert failed == 0
    assert {r["axis"] for r in rows} == {"density"}
    assert [r["axis_value"] for r in rows] == [0.8, 1.2]


def test_run_sweep_marks_failed_points_and_continues(tmp_path):
    # an intensity so low that placement cannot connect the gateway
    broken = ScenarioConfig(region_side=80.0, intensity=1e-9, n_packets=10)
    spec = SweepSpec("lsr", (0.5,), default_variants(["rpl"]), seeds=1)
    rows, failed = run_sweep(broken, spec, tmp_path / "f.csv")
    assert failed == 1
    assert rows[0]["pdr"] is None
    parsed = read_sweep_csv(tmp_path / "f.csv")
    assert parsed[0]["pdr"] == ""


def _write_csv(path, rows):
    import csv as _csv

    with path.open("w", newline="") as handle:
        writer = _csv.DictWriter(handle, fieldnames=[
            "protocol", "class", "axis", "axis_value", "seed",
            "pdr", "mean_retx", "mean_delay_slots", "mean_delay_ms",
            "sent", "delivered", "dropped",
        ])
        writer.writeheader()
        writer.writerows(rows)


def _mean_row(protocol, cls, value, pdr, delay):
    return {
        "protocol": protocol, "class": cls, "axis": "lsr", "axis_value": value,
        "seed": "mean", "pdr": pdr, "mean_retx": 1.0,
        "mean_delay_slots": delay, "mean_delay_ms": delay * 10,
        "sent": 100, "delivered": int(100 * pdr), "dropped": 100 - int(100 * pdr),
    }


def test_emit_comparison_identical_protocols_all_zero(tmp_path):
    path = tmp_path / "cmp.csv"
    _write_csv(path, [
        _mean_row("rpl", "-", 0.5, 0.6, 8.0),
        _mean_row("opp_rpl", "-", 0.5, 0.6, 8.0),
        _mean_row("coop_rpl", "best_effort", 0.5, 0.6, 8.0),
    ])
    out = io.StringIO()
    results = emit_comparison(path, out=out)
    be = results["best_effort"]
    assert be["dpdr_vs_rpl_points"] == pytest.approx(0.0)
    assert be["dpdr_vs_opp_points"] == pytest.approx(0.0)
    assert be["delay_reduction_vs_rpl_pct"] == pytest.approx(0.0)


def test_emit_comparison_reports_max_over_sweep(tmp_path):
    path = tmp_path / "cmp2.csv"
    _write_csv(path, [
        _mean_row("rpl", "-", 0.5, 0.50, 10.0),
        _mean_row("rpl", "-", 0.9, 0.90, 5.0),
        _mean_row("coop_rpl", "best_effort", 0.5, 0.65, 8.5),
        _mean_row("coop_rpl", "best_effort", 0.9, 0.92, 5.0),
    ])
    results = emit_comparison(path, out=io.StringIO())
    be = results["best_effort"]
    assert be["dpdr_vs_rpl_points"] == pytest.approx(15.0)
    assert be["delay_reduction_vs_rpl_pct"] == pytest.approx(15.0)
    assert be["dpdr_vs_opp_points"] is None


def test_emit_comparison_needs_baseline(tmp_path):
    path = tmp_path / "nobase.csv"
    _write_csv(path, [_mean_row("coop_rpl", "a", 0.5, 0.6, 7.0)])
    with pytest.raises(ValueError, match="rpl baseline"):
        emit_comparison(path, out=io.StringIO())


def test_main_single_run_echoes_config_and_reports(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(
        "[scenario]\nregion_side = 80\nintensity = 0.0015625\nn_packets = 40\n"
        "[channel]\nlsr_value = 0.8\n"
    )
    code = main(["--config", str(cfg_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert "[scenario]" in out  # resolved config echoed
    assert "pdr = " in out
    # echoed config re-parses to the same thing
    echoed = out.split("packets_sent")[0]
    assert parse_scenario_text(echoed).lsr_value == 0.8


def test_main_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[channel]\nlsr_value = 1.3\n")
    assert main(["--config", str(bad)]) == 1
    assert "probability out of range" in capsys.readouterr().err


def test_main_sweep_writes_csv_and_comparison(tmp_path, capsys):
    cfg_path = tmp_path / "s.cfg"
    cfg_path.write_text(
        "[scenario]\nregion_side = 80\nintensity = 0.0015625\nn_packets = 40\n"
    )
    out_csv = tmp_path / "out.csv"
    code = main([
        "--config", str(cfg_path), "--sweep", "lsr", "--values", "0.6,0.9",
        "--protocols", "rpl,coop_rpl", "--classes", "best_effort",
        "--seeds", "2", "--out", str(out_csv), "--quiet",
    ])
    assert code == 0
    assert out_csv.exists()
    out = capsys.readouterr().out
    assert "max-over-sweep comparison" in out


def test_main_sweep_partial_failure_exit_code(tmp_path, capsys):
    cfg_path = tmp_path / "broken.cfg"
    # intensity too thin to ever connect the gateway: every point fails
    cfg_path.write_text("[scenario]\nintensity = 1e-9\nn_packets = 10\n")
    code = main([
        "--config", str(cfg_path), "--sweep", "lsr", "--values", "0.5",
        "--protocols", "rpl", "--seeds", "1",
        "--out", str(tmp_path / "broken.csv"), "--quiet",
    ])
    assert code == 2
    assert "1 failed" in capsys.readouterr().out


def test_main_trace_written_for_single_run(tmp_path):
    cfg_path = tmp_path / "t.cfg"
    cfg_path.write_text(
        "[scenario]\nregion_side = 80\nintensity = 0.0015625\nn_packets = 20\n"
        "protocol = coop_rpl\n[channel]\nlsr_value = 0.7\n"
    )
    trace_path = tmp_path / "trace.jsonl"
    code = main(["--config", str(cfg_path), "--trace", str(trace_path), "--quiet"])
    assert code == 0
    lines = trace_path.read_text().strip().splitlines()
    assert len(lines) > 20
    import json

    records = [json.loads(line) for line in lines]
    assert any(r.get("type") == "DIO" for r in records)
    assert any("packet_id" in r for r in records)
