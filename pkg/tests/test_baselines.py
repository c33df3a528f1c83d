import numpy as np
import pytest

from rdpc.baselines import (
    ArxModel,
    RlsState,
    arx_predictor,
    arx_regressor,
    batch_least_squares,
    non_robust_control,
    rls_robust_mpc,
    rls_update,
    single_level_deepc,
)
from rdpc.hankel import Dataset, build_stack
from rdpc.predictor import RegularizerWeights, factorize_kkt
from rdpc.robust import Box, ObjectiveSpec, solve_control

from .conftest import A2, B2, C2, random_dataset, rollout

OPEN = Box([-np.inf], [np.inf])


def test_rls_scalar_hand_recursion():
    s = rls_update(RlsState(np.zeros(1), np.eye(1), lam=1.0), [1.0], [2.0])
    assert s.theta[0, 0] == 1.0
    assert s.P[0, 0] == 0.5


def test_rls_zero_innovation(rng):
    theta = rng.normal(size=(4, 2))
    phi = rng.normal(size=4)
    s = rls_update(RlsState(theta, np.eye(4), 0.95), phi, phi @ theta)
    np.testing.assert_allclose(s.theta, theta, atol=1e-14)


def test_rls_forgetting_factor_range():
    with pytest.raises(ValueError):
        RlsState(np.zeros(1), np.eye(1), lam=0.0)


def test_rls_without_forgetting_is_batch_ls(rng):
    for _ in range(20):
        n_phi, n_y, N = int(rng.integers(2, 7)), int(rng.integers(1, 3)), 80
        Phi = rng.normal(size=(N, n_phi))
        Y = Phi @ rng.normal(size=(n_phi, n_y)) + 0.1 * rng.normal(size=(N, n_y))
        n0 = n_phi + 2
        P = np.linalg.inv(Phi[:n0].T @ Phi[:n0])
        s = RlsState(P @ Phi[:n0].T @ Y[:n0], P, lam=1.0)
        for k in range(n0, N):
            s = rls_update(s, Phi[k], Y[k])
        ref, *_ = np.linalg.lstsq(Phi, Y, rcond=None)
        assert np.linalg.norm(s.theta - ref) <= 1e-6 * np.linalg.norm(ref)


def test_regressor_order():
    phi = arx_regressor([[1.0], [2.0]], [[3.0], [4.0]], [[5.0], [6.0]])
    np.testing.assert_array_equal(phi, [2, 1, 4, 3, 6, 5])


def test_theta_roundtrip(rng):
    theta = rng.normal(size=(3 * (2 + 1 + 2), 2))
    m = ArxModel.from_theta(theta, 3, 2, 1, 2)
    np.testing.assert_array_equal(m.to_theta(), theta)
    # theta_j acts on the sample j steps back
    y, u, w = rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), rng.normal(size=(3, 2))
    direct = sum(m.theta_y[j - 1] @ y[-j] + m.theta_u[j - 1] @ u[-j] + m.theta_w[j - 1] @ w[-j] for j in (1, 2, 3))
    np.testing.assert_allclose(arx_regressor(y, u, w) @ theta, direct, atol=1e-12)


def exact_arx(lti_dataset):
    theta = batch_least_squares(lti_dataset, 2)
    return ArxModel.from_theta(theta, 2, 1, 1, 1)


def test_exact_arx_predicts_plant(rng, lti_dataset):
    model = exact_arx(lti_dataset)
    for _ in range(10):
        u, w = rng.uniform(-10, 10, 12), rng.uniform(-1, 1, 12)
        y, _ = rollout(rng.normal(size=2), u, w)
        # ARX output j steps after the history uses inputs up to the previous step
        y0, P_u, P_w = arx_predictor(model, (y[:2], u[:2], w[:2]), 10)
        np.testing.assert_allclose(y0 + P_u @ u[2:] + P_w @ w[2:], y[2:], atol=1e-8)


def test_arx_rollout_matches_recursion(rng):
    model = ArxModel(rng.normal(size=(3, 2, 2)) * 0.3, rng.normal(size=(3, 2, 1)), rng.normal(size=(3, 2, 1)))
    hy, hu, hw = rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
    u, w = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
    y0, P_u, P_w = arx_predictor(model, (hy, hu, hw), 5)
    ys, us, ws = list(hy), list(hu), list(hw)
    for k in range(5):
        ys.append(sum(model.theta_y[j - 1] @ ys[-j] + model.theta_u[j - 1] @ us[-j] + model.theta_w[j - 1] @ ws[-j]
                      for j in (1, 2, 3)))
        us.append(u[k])
        ws.append(w[k])
    np.testing.assert_allclose(y0 + P_u @ u.ravel() + P_w @ w.ravel(), np.ravel(ys[3:]), atol=1e-10)


def test_zero_model_predicts_zero():
    model = ArxModel(np.zeros((2, 1, 1)), np.zeros((2, 1, 1)), np.zeros((2, 1, 1)))
    hist = (np.ones(2), np.ones(2), np.ones(2))
    sol = rls_robust_mpc(model, hist, (np.zeros(5), Box.symmetric([1.0])), (Box([-1.0], [1.0]), Box([-0.1], [0.1])),
                         ObjectiveSpec(), 5)
    np.testing.assert_allclose(sol.y_nominal, 0.0, atol=1e-9)
    with pytest.raises(Exception):
        rls_robust_mpc(model, hist, (np.zeros(5), Box.symmetric([1.0])), (Box([-1.0], [1.0]), Box([0.5], [1.0])),
                       ObjectiveSpec(), 5)


def test_rls_mpc_point_box_matches_nominal(lti_dataset):
    model = exact_arx(lti_dataset)
    hist = (np.zeros(2), np.zeros(2), np.zeros(2))
    sets = (Box([-10.0], [10.0]), OPEN)
    a = rls_robust_mpc(model, hist, (np.zeros(5), Box.point([0.0])), sets, ObjectiveSpec(y_ref=0.3), 5)
    b = rls_robust_mpc(model, hist, (np.zeros(5), Box.point([0.0])), sets, ObjectiveSpec(y_ref=0.3), 5, feedback=False)
    np.testing.assert_allclose(a.u_nominal, b.u_nominal, atol=1e-6)


# -- single-level DeePC


def test_deepc_zero_sets_accept_zero_g(rng):
    stk = build_stack(random_dataset(rng, 40), 3, 4)
    hist = (rng.normal(size=3) * 5, np.zeros(3), np.zeros(3))
    sol = single_level_deepc(stk, hist, np.zeros(4), (Box.point([0.0]), Box.point([0.0])), 1.0, 1.0, ObjectiveSpec())
    np.testing.assert_allclose(sol.u_pred, 0, atol=1e-6)
    np.testing.assert_allclose(sol.y_pred, 0, atol=1e-6)
    # g = 0 with the slack absorbing the history is feasible, so it bounds the optimum
    assert sol.objective_value <= 1.0 * hist[0] @ hist[0] + 1e-6


def test_deepc_heavy_slack_price_predicts_plant(rng, lti_dataset):
    stk = build_stack(lti_dataset, 4, 6)
    u, w = rng.uniform(-3, 3, 10), rng.uniform(-1, 1, 10)
    y, _ = rollout(rng.normal(size=2), u, w)
    sol = single_level_deepc(stk, (y[:4], u[:4], w[:4]), w[4:], (Box([-10.0], [10.0]), OPEN), 1e-6, 1e6,
                             ObjectiveSpec(y_ref=0.2))
    # replay the planned inputs on the plant from the same initial window
    y_true, _ = rollout(_state_after(y[:4], u[:4], w[:4]), sol.u_pred, w[4:])
    np.testing.assert_allclose(sol.y_pred, y_true, atol=1e-3)


def _state_after(y, u, w):
    """Recover the state at the end of a window from outputs and inputs."""
    rows, rhs = [], []
    for k in range(len(y)):
        Ak = np.linalg.matrix_power(A2, k)
        forced = sum(C2 @ np.linalg.matrix_power(A2, k - 1 - j) @ B2 * (u[j] + w[j]) for j in range(k))
        rows.append(C2 @ Ak)
        rhs.append(y[k] - forced)
    x0 = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    _, x = rollout(x0, u, w)
    return x


def test_deepc_without_regularizers_is_pure_tracking(rng, lti_dataset):
    stk = build_stack(lti_dataset, 4, 6)
    u, w = rng.uniform(-3, 3, 4), rng.uniform(-1, 1, 10)
    y, _ = rollout(rng.normal(size=2), u, w[:4])
    obj = ObjectiveSpec(y_ref=0.2)
    sol = single_level_deepc(stk, (y, u, w[:4]), w[4:], (Box([-10.0], [10.0]), OPEN), 0.0, 0.0, obj)
    J = 10 * np.sum((sol.y_pred - 0.2) ** 2) + 0.1 * np.sum(sol.u_pred**2)
    assert sol.objective_value == pytest.approx(J, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("eta_g, eta_sigma", [(0.01, 1.0), (1.0, 100.0), (10.0, 1e4)])
def test_deepc_equalities_hold(rng, lti_dataset, eta_g, eta_sigma):
    stk = build_stack(lti_dataset, 4, 6)
    hist = (rng.normal(size=4), rng.normal(size=4), rng.normal(size=4))
    w_pred = rng.normal(size=6) * 0.5
    sol = single_level_deepc(stk, hist, w_pred, (Box([-10.0], [10.0]), Box([-5.0], [5.0])), eta_g, eta_sigma,
                             ObjectiveSpec())
    np.testing.assert_allclose(stk.H_u_init @ sol.g, hist[1], atol=1e-6)
    np.testing.assert_allclose(stk.H_w_pred @ sol.g, w_pred, atol=1e-6)
    np.testing.assert_allclose(stk.H_y_init @ sol.g, hist[0] + sol.sigma, atol=1e-6)


# -- non-robust variant


def test_non_robust_is_point_uncertainty_without_feedback(lti_dataset):
    stk = build_stack(lti_dataset, 4, 6)
    fac = factorize_kkt(stk, RegularizerWeights.constant(1e-3, stk.n_c))
    hist = (np.zeros(4), np.zeros(4), np.zeros(4))
    sets = (Box([-10.0], [10.0]), Box(np.r_[-np.inf, [-2.0] * 5], np.r_[np.inf, [0.5] * 5]))
    obj = ObjectiveSpec(y_ref=0.4)
    a = non_robust_control(fac, stk, hist, np.zeros(6), sets, obj)
    b = solve_control(fac, stk, hist, (np.zeros(6), Box.point([0.0])), sets, obj, feedback=False)
    np.testing.assert_array_equal(a.z, b.z)
    robust = solve_control(fac, stk, hist, (np.zeros(6), Box.symmetric([1.0])), sets, obj)
    assert a.objective_value <= robust.objective_value + 1e-9
