import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aoicosim.cosim import build_controllers, platoon_config
from aoicosim.dmpc.controller import bootstrap_message
from aoicosim.dmpc.model import (ModelError, SubsystemModel, build_augmented_model,
                                 estimate_neighbor_state)
from aoicosim.dmpc.policy import (PolicyQp, build_feedback_mask, compute_envelope,
                                  shift_input_constraint, shift_policy)
from aoicosim.dmpc.terminal import (TerminalError, assumption_status, synthesize_terminal,
                                    verify_terminal)
from aoicosim.numkernel import QpProblem, StabilityError, solve_qp, support_function

A = np.array([[1.0, 0.3], [0.0, 1.0]])
B = np.array([[0.045], [0.3]])
GAINS = {1: [-0.03, -0.54, 0.03, 0.54], 2: [-0.06, -0.6, 0.06, 0.6]}


@pytest.fixture(scope="module")
def platoon():
    cfg = platoon_config()
    models, ctrls = build_controllers(cfg)
    return cfg, models, ctrls


def follower_qp_data(cfg, models, ctrl):
    """QP data of a follower at step 0 from the bootstrap message."""
    j = ctrl.nbr
    msg = bootstrap_message(j, models[j], cfg.subsystems[j].x0, cfg.u_init,
                            cfg.subsystems[j].halfwidth, cfg.H)
    x_hat, U1, cols, center, half = ctrl.neighbor_data(0, msg)
    x0 = np.concatenate([cfg.subsystems[ctrl.index].x0, x_hat])
    return x0, U1, cols, center, half


# -- models ----------------------------------------------------------------------

def test_augmented_no_neighbors():
    aug = build_augmented_model(SubsystemModel(A, B, 3.0), [])
    np.testing.assert_array_equal(aug.A, A)
    np.testing.assert_array_equal(aug.B, B)
    assert aug.B1.shape == (2, 0)


def test_augmented_one_neighbor():
    m = SubsystemModel(A, B, 3.0)
    aug = build_augmented_model(m, [m])
    np.testing.assert_array_equal(aug.A, np.kron(np.eye(2), A))
    np.testing.assert_array_equal(aug.B, np.vstack([B, np.zeros((2, 1))]))
    np.testing.assert_array_equal(aug.B1, np.vstack([np.zeros((2, 1)), B]))
    np.testing.assert_array_equal(aug.B2, aug.B1)


def test_augmented_two_neighbors():
    m = SubsystemModel(A, B, 3.0)
    aug = build_augmented_model(m, [m, m])
    assert aug.nx == 6
    assert aug.B1.shape == (6, 2)
    np.testing.assert_array_equal(aug.B1[2:4, 0], B[:, 0])
    np.testing.assert_array_equal(aug.B1[4:6, 1], B[:, 0])
    np.testing.assert_array_equal(aug.B1[:2], 0.0)


def test_model_validation():
    with pytest.raises(ModelError):
        SubsystemModel(np.ones((2, 3)), np.ones(2), 1.0)
    with pytest.raises(ModelError):
        SubsystemModel(A, B, 0.0)


def test_estimate_age_one_zero_input():
    m = SubsystemModel(A, B, 3.0)
    x = np.array([2.0, -1.0])
    np.testing.assert_allclose(estimate_neighbor_state(m, x, [0.0], 1), A @ x)


def test_estimate_age_four_closed_form():
    m = SubsystemModel(A, B, 3.0)
    x = np.array([1.0, 5.0])
    dt, k, u = 0.3, 4, 1.0
    est = estimate_neighbor_state(m, x, np.ones(8), k)
    np.testing.assert_allclose(est, [x[0] + k * dt * x[1] + 0.5 * (k * dt) ** 2 * u,
                                     x[1] + k * dt * u], atol=1e-12)


def test_estimate_boundary_inputs_finite():
    m = SubsystemModel(A, B, 1.98)
    est = estimate_neighbor_state(m, np.array([0.0, 5.0]), np.full(4, 1.98), 4)
    assert np.all(np.isfinite(est))


def test_estimate_missing_coverage():
    m = SubsystemModel(A, B, 3.0)
    with pytest.raises(ModelError):
        estimate_neighbor_state(m, np.zeros(2), [0.0, 0.0], 3)


# -- feedback mask -------------------------------------------------------------------

def test_mask_fresh_data():
    H = 8
    mask, offs = build_feedback_mask(1, np.ones(H), H, 4)
    expected = offs[None, :] <= np.arange(H)[:, None] - 1
    np.testing.assert_array_equal(mask, expected)
    assert not mask[0].any()


def test_mask_constant_worst_age():
    H = 8
    mask, offs = build_feedback_mask(4, None, H, 4, mode="worstcase")
    np.testing.assert_array_equal(mask, offs[None, :] <= np.arange(H)[:, None] - 4)


def test_mask_forecast_reset_is_superset():
    H = 8
    fc = np.array([4, 1, 2, 3, 4, 1, 2, 3], dtype=float)
    m_fc, _ = build_feedback_mask(3, fc, H, 4)
    m_wc, _ = build_feedback_mask(3, fc, H, 4, mode="worstcase")
    assert m_fc.sum() > m_wc.sum()
    assert np.all(m_fc >= m_wc)


@given(st.integers(1, 4), st.lists(st.integers(1, 4), min_size=7, max_size=7),
       st.lists(st.integers(0, 3), min_size=7, max_size=7))
def test_mask_monotone_in_freshness(a_now, fc, fresher):
    fc = np.array(fc, dtype=float)
    fc2 = np.maximum(fc - np.array(fresher), 1.0)
    m1, _ = build_feedback_mask(a_now, fc, 8, 4)
    m2, _ = build_feedback_mask(a_now, fc2, 8, 4)
    assert np.all(m2 >= m1)
    assert not m1[0].any()


# -- envelope and shifting -----------------------------------------------------------

def test_envelope_zero_gain():
    hi, lo = compute_envelope(np.zeros((4, 3)), np.zeros(3), np.ones(3))
    np.testing.assert_array_equal(hi, 0.0)
    np.testing.assert_array_equal(lo, 0.0)


def test_envelope_scalar():
    hi, lo = compute_envelope([[-0.7]], [0.0], [2.0])
    assert hi[0] == pytest.approx(1.4) and lo[0] == pytest.approx(1.4)


def test_envelope_vs_box_vertices(rng):
    for _ in range(20):
        H, D = 6, 4
        K = rng.standard_normal((H, D)) * (rng.uniform(size=(H, D)) < 0.6)
        center = rng.standard_normal(D)
        half = rng.uniform(0.0, 1.0, D)
        hi, lo = compute_envelope(K, center, half)
        verts = np.array([center + half * np.array(s)
                          for s in itertools.product([-1, 1], repeat=D)])
        vals = verts @ K.T
        np.testing.assert_allclose(hi, vals.max(axis=0), atol=1e-9)
        np.testing.assert_allclose(-lo, vals.min(axis=0), atol=1e-9)


def test_shift_constraint_pins_plan():
    v = np.array([0.5, -0.2, 0.1, 0.3])
    lo, hi = shift_input_constraint(v, np.zeros(4), np.zeros(4), 3.0)
    np.testing.assert_array_equal(lo[:-1], v[1:])
    np.testing.assert_array_equal(hi[:-1], v[1:])
    assert (lo[-1], hi[-1]) == (-3.0, 3.0)


def test_shift_constraint_intersects_previous():
    v = np.zeros(3)
    lo, hi = shift_input_constraint(v, np.ones(3), np.ones(3), 3.0,
                                    lo=np.array([-2, -0.5, -2.0]), hi=np.array([2, 2, 0.25]))
    np.testing.assert_array_equal(lo, [-0.5, -1.0, -3.0])
    np.testing.assert_array_equal(hi, [1.0, 0.25, 3.0])


def test_shift_policy_zero_deviation():
    v = np.array([1.0, 2.0, 3.0])
    out = shift_policy(v, np.ones((3, 2)), [(0, -1), (0, 0)], {}, 5, -0.5)
    np.testing.assert_array_equal(out, [2.0, 3.0, -0.5])


def test_shift_policy_single_deviation():
    v = np.zeros(4)
    K = np.array([[0, 0], [0.5, 0], [0.25, 0.1], [0.2, 0.3]])
    cols = [(0, 0), (0, 1)]
    out = shift_policy(v, K, cols, {10: 2.0}, 10, 0.0)
    np.testing.assert_allclose(out, [1.0, 0.5, 0.4, 0.0])


# -- prediction and QP ---------------------------------------------------------------

def test_prediction_matches_iteration(platoon, rng):
    cfg, models, ctrls = platoon
    qp = ctrls[1].qp
    aug = ctrls[1].aug
    H = qp.H
    for _ in range(10):
        x0 = rng.standard_normal(4)
        v = rng.standard_normal(H)
        U1 = rng.standard_normal(H)
        cols = [(0, q) for q in range(-2, H)]
        d = rng.standard_normal(len(cols))
        K = rng.standard_normal((H, len(cols)))
        X, u = qp.predict(x0, U1, v, K, d, cols)
        dev = dict(zip([q for _, q in cols], d))
        # deviations before step k only show up in the neighbor's true state
        x = x0 + sum(np.linalg.matrix_power(aug.A, -1 - q) @ aug.B1[:, 0] * dq
                     for q, dq in dev.items() if q < 0)
        for l in range(H):
            un = U1[l] + dev.get(l, 0.0)
            x = aug.A @ x + aug.B[:, 0] * u[l] + aug.B1[:, 0] * un
            assert np.abs(x - X[l]).max() <= 1e-12 * (1 + np.abs(x).max())


def nominal_mpc_oracle(aug, H, Qx, Qu, P, F, f, window, x0, U1, gap, u_lo, u_hi):
    """Plain MPC assembled from rollouts, no robust terms."""
    nx = aug.nx

    def rollout(v):
        xs, x = [], x0
        for l in range(H):
            x = aug.A @ x + aug.B[:, 0] * v[l] + aug.B1[:, 0] * U1[l]
            xs.append(x)
        return np.array(xs)

    def cost(v):
        X = rollout(v)
        c = x0 @ Qx @ x0
        for l in range(H):
            w = np.array([v[l], U1[l]])
            c += w @ Qu @ w
            if l < H - 1:
                c += X[l] @ Qx @ X[l]
        xi = X[H - window:].ravel()
        return c + xi @ P @ xi

    # cost and constraints are quadratic / affine in v: recover them exactly
    c0 = cost(np.zeros(H))
    E = np.eye(H)
    Hm = np.zeros((H, H))
    for i in range(H):
        for j in range(H):
            Hm[i, j] = cost(E[i] + E[j]) - cost(E[i]) - cost(E[j]) + c0
    g = np.array([cost(E[i]) - c0 for i in range(H)]) - 0.5 * np.diag(Hm)
    X0 = rollout(np.zeros(H))
    rows, rhs = [], []
    for l in range(H):
        Xl = np.array([rollout(E[i])[l] - X0[l] for i in range(H)]).T
        rows += [gap @ Xl, -gap @ Xl]
        rhs += [200.0 - gap @ X0[l], gap @ X0[l]]
    Xw = np.hstack([np.array([rollout(E[i])[l] - X0[l] for i in range(H)]).T.T
                    for l in range(H - window, H)])
    xi0 = X0[H - window:].ravel()
    for frow, fv in zip(F, f):
        rows.append(Xw @ frow)
        rhs.append(fv - frow @ xi0)
    C = np.vstack([np.array(rows), E, -E])
    b = np.concatenate([rhs, u_hi, -u_lo])
    return solve_qp(QpProblem(Hm, g, C, b)).x


def test_zero_envelope_matches_nominal_mpc(platoon):
    cfg, models, ctrls = platoon
    c = ctrls[1]
    term = c.terminal
    H = cfg.H
    F, f = term.X_abs.C, term.X_abs.b
    qp = PolicyQp(c.aug, H, c.Qx, c.Qu, coupled=[(np.array([-1, 0, 1, 0.0]), 0.0, 200.0)],
                  window=c.abar, P_window=term.P, F_window=F, f_window=f)
    x0 = np.array([-14.0, 5.0, -10.0, 5.0])
    U1 = np.zeros(H)
    cols = [(0, q) for q in range(0, H)]
    zero = np.zeros(H)
    u_lo, u_hi = np.full(H, -3.0), np.full(H, 3.0)
    full = np.tril(np.ones((H, H), dtype=bool), -1)
    r1 = qp.solve(x0, U1, cols, zero, zero, full, u_lo, u_hi)
    r2 = qp.solve(x0, U1, cols, zero, zero, np.zeros((H, H), dtype=bool), u_lo, u_hi)
    assert r1.ok and r2.ok
    assert r1.objective == pytest.approx(r2.objective, abs=1e-6)
    ref = nominal_mpc_oracle(c.aug, H, c.Qx, c.Qu, term.P, F, f, c.abar, x0, U1,
                             np.array([-1, 0, 1, 0.0]), u_lo, u_hi)
    np.testing.assert_allclose(r1.v, ref, atol=1e-6)


def test_equilibrium_zero_solution(platoon):
    cfg, models, ctrls = platoon
    c = ctrls[1]
    H = cfg.H
    x0 = np.array([0.0, 0.0, 0.0, 0.0])
    cols = [(0, q) for q in range(0, H)]
    res = c.qp.solve(x0, np.zeros(H), cols, np.zeros(H), np.zeros(H),
                     np.zeros((H, H), dtype=bool), np.full(H, -3.0), np.full(H, 3.0))
    assert res.ok
    # the equilibrium sits on the gap bound, so v is only accurate to ~1e-7
    np.testing.assert_allclose(res.v, 0.0, atol=1e-6)
    assert abs(res.objective) <= 1e-9


def test_box_tightening_term(platoon):
    cfg, models, ctrls = platoon
    c = ctrls[1]
    H = cfg.H
    x0 = np.array([-14.0, 5.0, -10.0, 5.0])
    v = np.zeros(H)
    cols = [(0, q) for q in range(0, H)]
    K = np.zeros((H, H))
    half = np.full(H, 0.3)
    hi, _, _, _ = c.qp.robust_rows(x0, np.zeros(H), cols, np.zeros(H), half, v, K)
    nom, _, _, _ = c.qp.robust_rows(x0, np.zeros(H), cols, np.zeros(H), np.zeros(H), v, K)
    # gap row at step l: mapped row weights the deviations by the neighbor's B column
    for l in range(H):
        row = l
        coeff = sum(abs((np.linalg.matrix_power(A, l - m) @ B)[0, 0]) for m in range(l + 1))
        assert hi[row] - nom[row] == pytest.approx(0.3 * coeff, abs=1e-12)


def test_robust_policy_closed_loop(platoon, rng):
    cfg, models, ctrls = platoon
    c = ctrls[2]
    x0, U1, cols, center, half = follower_qp_data(cfg, models, c)
    mask, _ = build_feedback_mask(1, np.arange(2, 10), cfg.H, cfg.abar)
    res = c.qp.solve(x0, U1, cols, center, half, mask, c.lo_next, c.hi_next)
    assert res.ok
    # K is exactly zero outside the mask
    assert np.all(res.K[~mask] == 0.0)
    term = c.terminal
    nx = 2
    Fs = term.X_safe.C @ np.hstack([-np.eye(nx), np.eye(nx)])
    for _ in range(100):
        d = center + half * rng.choice([-1.0, 1.0], size=half.size)
        X, u = c.qp.predict(x0, U1, res.v, res.K, d, cols)
        gaps = X[:, 2] - X[:, 0]
        assert gaps.min() >= -1e-7 and gaps.max() <= 200 + 1e-7
        assert np.all(u >= c.lo_next - 1e-7) and np.all(u <= c.hi_next + 1e-7)
        assert np.all(Fs @ X[-1] <= term.X_safe.b + 1e-7)
        delta = res.K @ d - res.K @ center
        assert np.all(delta <= res.gamma_hi - res.K @ center + 1e-9)
        assert np.all(-delta <= res.gamma_lo + res.K @ center + 1e-9)


def test_first_step_feasible(platoon):
    cfg, models, ctrls = platoon
    c = ctrls[1]
    x0, U1, cols, center, half = follower_qp_data(cfg, models, c)
    mask, _ = build_feedback_mask(1, None, cfg.H, cfg.abar, mode="worstcase")
    assert c.qp.solve(x0, U1, cols, center, half, mask, c.lo_next, c.hi_next).ok


# -- terminal ingredients ------------------------------------------------------------

@pytest.mark.parametrize("i", [1, 2])
def test_terminal_checks_pass(platoon, i):
    cfg, models, ctrls = platoon
    checks = verify_terminal(ctrls[i].terminal)
    assert all(ok for ok, _ in checks.values()), checks
    assert checks["schur"][1] < 1.0
    assert checks["lyapunov"][1] <= 1e-8
    assert all(ok for ok, _ in assumption_status(checks).values())


def test_terminal_zero_gain_not_schur():
    Qx = np.kron(np.array([[1, -1], [-1, 1.0]]), np.diag([5.0, 1.0]))
    Qu = 0.1 * np.array([[1, -1], [-1, 1.0]])
    with pytest.raises(StabilityError, match="not Schur-stable"):
        synthesize_terminal(A, B, np.zeros((1, 4)), Qx, Qu, 4, 3.0, 1.98)


def test_terminal_gain_must_be_relative():
    Qx = np.kron(np.array([[1, -1], [-1, 1.0]]), np.diag([5.0, 1.0]))
    Qu = 0.1 * np.array([[1, -1], [-1, 1.0]])
    with pytest.raises(TerminalError):
        synthesize_terminal(A, B, np.array([[0.1, -0.54, 0.03, 0.54]]), Qx, Qu, 4, 3.0, 1.98)


def test_assumption_status_names_failure():
    checks = {"schur": (True, 0.9), "lyapunov": (False, 1.0), "kernel": (True, 0.0)}
    status = assumption_status(checks)
    assert status["lyapunov decrease"] == (False, ["lyapunov"])
    assert status["kernel alignment"][0]


@pytest.mark.parametrize("scale", [1.0, 0.5, 1e-3])
def test_terminal_invariance_under_scaling(platoon, scale):
    term = platoon[2][1].terminal
    X = term.X_rel.scaled(scale)
    worst = max(support_function(X, c @ term.A_rel) - d for c, d in zip(X.C, X.b))
    assert worst <= 1e-9 * scale
