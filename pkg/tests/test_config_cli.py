import hashlib
import io

import numpy as np
import pytest

from aoicosim import cli
from aoicosim.config import (ConfigError, config_to_dict, load_preset, parse_config,
                             parse_config_text, serialize_config)
from aoicosim.cosim import platoon_config, run_scenario

GOLDEN_HEADER = ("k,aoi_21,aoi_32,fc_21,fc_32,sched,x1_1,v1,u1,x1_2,v2,u2,x1_3,v3,u3,"
                 "span,qp2,qp3,event")


@pytest.fixture(scope="module")
def short_run():
    return run_scenario(platoon_config(steps=12), seed=0)


# -- config -----------------------------------------------------------------------

def test_preset_is_the_platoon_scenario():
    cfg = load_preset("platoon")
    assert config_to_dict(cfg) == config_to_dict(platoon_config())
    s = cfg.subsystems
    np.testing.assert_array_equal(s[0].A, [[1, 0.3], [0, 1]])
    np.testing.assert_array_equal(s[0].B, [[0.045], [0.3]])
    assert [x.u_bound for x in s] == [1.98, 3.0, 5.0]
    assert [x.x0[0] for x in s] == [-13.0, -20.0, -25.0]
    assert all(x.x0[1] == 5.0 for x in s)
    assert cfg.H == 8
    np.testing.assert_array_equal(cfg.Q, np.diag([5.0, 1.0]))


def test_round_trip():
    cfg = load_preset("platoon")
    again = parse_config_text(serialize_config(cfg))
    assert config_to_dict(again) == config_to_dict(cfg)
    assert serialize_config(again) == serialize_config(cfg)


def test_empty_file():
    with pytest.raises(ConfigError, match="missing required key: subsystems"):
        parse_config_text("")


def test_non_stochastic_row():
    text = serialize_config(platoon_config()).replace(
        "T = [[0.0, 1.0,", "T = [[0.0, 0.9,", 1)
    with pytest.raises(ConfigError, match="transition matrix row not stochastic") as exc:
        parse_config_text(text, "bad.cfg")
    assert exc.value.key == "T"
    assert exc.value.line == text.splitlines().index(
        next(l for l in text.splitlines() if l.startswith("T ="))) + 1


def test_unknown_key_names_line():
    text = serialize_config(platoon_config()).replace("[reference]", "[reference]\nspeed = 3")
    with pytest.raises(ConfigError, match="unknown key") as exc:
        parse_config_text(text)
    assert exc.value.key == "speed"
    assert text.splitlines()[exc.value.line - 1].startswith("speed")


def test_unknown_section():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config_text("[plant]\nx = 1\n")


def test_integer_key_checked():
    text = serialize_config(platoon_config()).replace("steps = 80", "steps = 8.5")
    with pytest.raises(ConfigError, match="integer"):
        parse_config_text(text)


def test_horizon_invariant():
    text = serialize_config(platoon_config()).replace("H = 8", "H = 2")
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert exc.value.key == "H"


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "nope.cfg")


# -- trace CSV and summary ---------------------------------------------------------

def test_golden_header(tmp_path):
    path = tmp_path / "empty.csv"
    cli.emit_trace_csv(None, path, cfg=platoon_config())
    assert path.read_text() == GOLDEN_HEADER + "\n"


def test_csv_rows_and_round_trip(tmp_path, short_run):
    path = tmp_path / "t.csv"
    cli.emit_trace_csv(short_run, path)
    raw = path.read_bytes()
    assert len(raw.decode().splitlines()) == 13
    header, rows = cli.read_trace_csv(path)
    assert ",".join(header) == GOLDEN_HEADER
    again = tmp_path / "t2.csv"
    cli.write_csv(header, cli.format_rows(header, rows), again)
    assert again.read_bytes() == raw


def test_summary_identical_modes():
    m = {"span_mean": 5.0, "span_std": 0.0, "aoi_max": 4, "infeasible": 0,
         "constraint_violations": 0, "envelope_violations": 0, "forecast_violations": 0}
    text = cli.emit_summary({"forecast": m, "worstcase": m}, io.StringIO())
    assert "0.0%" in text and "reference 37%" in text


def test_summary_mc_mean_std(short_run):
    from aoicosim.cosim import compute_metrics
    runs = [short_run, run_scenario(platoon_config(steps=12), seed=1)]
    m = compute_metrics(runs)
    spans = [r.span_after(0) for r in runs]
    text = cli.emit_summary({"forecast": m}, io.StringIO(), mc=True)
    assert f"{np.mean(spans):.3f} +- {np.std(spans):.3f}" in text


# -- command line -------------------------------------------------------------------

def run_cli(args):
    out = io.StringIO()
    return cli.main(args, out), out.getvalue()


def test_cli_usage_error():
    assert run_cli(["run", "--bogus"])[0] == cli.EXIT_USAGE
    assert run_cli([])[0] == cli.EXIT_USAGE
    assert run_cli(["run", "--preset", "platoon", "--config", "x.cfg"])[0] == cli.EXIT_USAGE
    assert run_cli(["mc", "--mc", "0"])[0] == cli.EXIT_USAGE


def test_cli_config_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("")
    assert run_cli(["run", "--config", str(bad)])[0] == cli.EXIT_CONFIG


def test_cli_verify_terminal_pass():
    code, out = run_cli(["verify-terminal", "--preset", "platoon"])
    assert code == cli.EXIT_OK
    assert "FAIL" not in out and "S3 invariance" in out


def test_cli_verify_terminal_names_assumption(tmp_path):
    # a gain that does not stabilize the delayed loop
    text = serialize_config(platoon_config()).replace(
        "gain = [[-0.03, -0.54, 0.03, 0.54]]", "gain = [[-0.5, -0.54, 0.5, 0.54]]")
    path = tmp_path / "unstable.cfg"
    path.write_text(text)
    code, out = run_cli(["verify-terminal", "--config", str(path)])
    assert code in (cli.EXIT_VERIFY, cli.EXIT_RUNTIME)


def test_cli_run_writes_trace(tmp_path):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(serialize_config(platoon_config(steps=10)))
    code, out = run_cli(["run", "--config", str(cfg), "--mode", "forecast", "--seed", "2",
                         "--out", str(tmp_path)])
    assert code == cli.EXIT_OK
    trace = tmp_path / "trace_forecast_seed2.csv"
    assert trace.read_text().splitlines()[0] == GOLDEN_HEADER
    assert "forecast" in out


def test_cli_oracle_bench():
    assert run_cli(["oracle-bench"])[0] == cli.EXIT_OK
