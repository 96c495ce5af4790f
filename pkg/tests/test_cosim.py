from dataclasses import replace

import numpy as np
import pytest

from aoicosim.cosim import (RunResult, ScenarioConfig, ScenarioError, compute_metrics,
                            nominal_config, platoon_config, run_monte_carlo, run_network,
                            run_scenario, trace_metrics, value_decrease_margins)
from aoicosim.dmpc.terminal import TerminalError


@pytest.fixture(scope="module")
def forecast_run():
    return run_scenario(platoon_config(), seed=1)


def test_consensus_equilibrium():
    base = nominal_config()
    subs = [base.subsystems[0], replace(base.subsystems[1], x0=np.array([0.0, 5.0]))]
    res = run_scenario(replace(base, subsystems=subs, steps=20))
    spans = np.array([r.span for r in res.trace])
    assert np.ptp(spans) <= 1e-6
    assert np.abs([r.u for r in res.trace]).max() <= 1e-6
    m = compute_metrics(res)
    assert m["span_mean"] == pytest.approx(spans.max())


def test_preset_scenario_max_aoi(forecast_run):
    assert forecast_run.max_aoi() == 4
    assert len(forecast_run.trace) == 80


def test_preset_scenario_events(forecast_run):
    tr = forecast_run.trace
    calm = run_scenario(platoon_config(setpoints=[], steps=30), seed=1).trace
    # the setpoint falling back at k=20 slows the leader relative to a run without it
    for k in range(20):
        np.testing.assert_array_equal(tr[k].x[0], calm[k].x[0])
    assert tr[21].u[0] < calm[21].u[0]
    assert tr[29].x[0][1] < calm[29].x[0][1] - 0.5
    assert "setpoint" in tr[20].event and "outage" in tr[59].event
    # no S2 -> S3 delivery lands inside the outage window
    ages = [tr[k].aoi[(2, 1)] for k in range(60, 63)]
    assert all(b == a + 1 for a, b in zip(ages, ages[1:]))


def test_run_is_deterministic():
    cfg = platoon_config(steps=25)
    r1, r2 = run_scenario(cfg, seed=4), run_scenario(cfg, seed=4)
    for a, b in zip(r1.trace, r2.trace):
        assert a.aoi == b.aoi and a.sched == b.sched
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.u, b.u)


def test_safety_and_feasibility(forecast_run):
    m = compute_metrics(forecast_run)
    assert m["infeasible"] == 0
    assert m["constraint_violations"] == 0
    assert m["envelope_violations"] == 0
    assert m["gap_violations"] == 0
    assert m["forecast_violations"] == 0 and m["refinement_violations"] == 0
    bounds = [s.u_bound for s in forecast_run.config.subsystems]
    assert np.all(trace_metrics(forecast_run)["u_max"] <= np.array(bounds) + 1e-7)


def test_monte_carlo_single_seed_equals_trace_metrics(forecast_run):
    summary = run_monte_carlo(platoon_config(), [1])
    single = trace_metrics(forecast_run)
    assert summary["span_mean"] == single["span_max"]
    assert summary["aoi_max"] == single["aoi_max"]
    assert summary["span_std"] == 0.0
    assert summary["seeds"] == [1]


def test_monte_carlo_requires_seeds():
    with pytest.raises(ScenarioError):
        run_monte_carlo(platoon_config(), [])


def test_network_only_reliability():
    _, _, viol, refine = run_network(platoon_config(), seed=2, steps=300)
    assert viol == 0 and refine == 0


def test_nominal_value_decrease():
    res = run_scenario(nominal_config())
    assert res.infeasible == 0
    assert value_decrease_margins(res).max() <= 1e-6


def test_worstcase_mode_runs():
    res = run_scenario(platoon_config(mode="worstcase", steps=30), seed=0)
    assert res.infeasible == 0 and res.constraint_violations == 0


@pytest.mark.parametrize("kwargs, key", [
    (dict(weights=np.zeros((2, 2))), "weights"),
    (dict(H=3), "H"),
    (dict(mode="bogus"), "mode"),
])
def test_config_errors_carry_key(kwargs, key):
    with pytest.raises(ScenarioError) as exc:
        platoon_config(**kwargs)
    assert exc.value.key == key


def test_leader_must_come_first():
    base = platoon_config()
    subs = [base.subsystems[1], base.subsystems[0], base.subsystems[2]]
    with pytest.raises(ScenarioError):
        replace(base, subsystems=subs)


def test_failed_terminal_check_aborts():
    base = platoon_config()
    # a neighbor stronger than the follower leaves no input margin
    subs = list(base.subsystems)
    subs[1] = replace(subs[1], u_bound=1.0)
    with pytest.raises(TerminalError):
        run_scenario(replace(base, subsystems=subs, steps=10))
