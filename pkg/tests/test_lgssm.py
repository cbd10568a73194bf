import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpssm_nav.errors import ConsistencyError, InputShapeError, InvalidArgumentsError
from gpssm_nav.lgssm import (LgssmParams, em_fit, em_step, kalman_filter, rts_smoother)

from oracles import condition, gauss_logpdf, lgssm_joint


def random_params(rng, D=2, Dy=2, Du=2):
    def spd(n, lo, hi):
        A = rng.normal(size=(n, n))
        return A @ A.T * 0.2 + np.diag(rng.uniform(lo, hi, n))
    F = np.eye(D) + 0.2 * rng.normal(size=(D, D))
    return LgssmParams(F, rng.normal(size=(D, Du)), spd(D, 0.1, 0.5), rng.normal(size=(Dy, D)),
                       spd(Dy, 0.2, 1.0), rng.normal(size=D), spd(D, 0.5, 2.0))


def simulate(params, T, rng, u=None):
    D = params.transition_matrix.shape[0]
    Du = params.control_matrix.shape[1]
    u = rng.normal(size=(T, Du)) if u is None else u
    x = rng.multivariate_normal(params.initial_mean, params.initial_cov)
    ys = []
    for t in range(T):
        x = (params.transition_matrix @ x + params.control_matrix @ u[t]
             + rng.multivariate_normal(np.zeros(D), params.transition_noise))
        ys.append(params.measurement_matrix @ x
                  + rng.multivariate_normal(np.zeros(len(params.measurement_noise)),
                                            params.measurement_noise))
    return np.array(ys), u


def joint_marginals(params, y, u):
    T = len(y)
    D = params.transition_matrix.shape[0]
    mean, cov = lgssm_joint(params, u, T)
    nx = D * (T + 1)
    m, c = condition(mean, cov, np.arange(nx, len(mean)), y.ravel())
    return m.reshape(T + 1, D), c, mean[nx:], cov[nx:, nx:]


def test_information_accumulates():
    p = LgssmParams.random_walk(1, 1e-12, 1.0, [0.0], 4.0)
    filt = kalman_filter(p, np.ones((6, 1)))
    assert np.all(np.diff(filt.covs[:, 0, 0]) < 0)


def test_single_step_conditioning():
    rng = np.random.default_rng(0)
    p = random_params(rng)
    y, u = simulate(p, 1, rng)
    filt = kalman_filter(p, y, u)
    m, c, *_ = joint_marginals(p, y, u)
    D = 2
    np.testing.assert_allclose(filt.means[1], m[1], atol=1e-8)
    np.testing.assert_allclose(filt.covs[1], c[D:2 * D, D:2 * D], atol=1e-8)
    sm = rts_smoother(p, filt)
    np.testing.assert_allclose(sm.means[1], filt.means[1], atol=1e-12)


def test_loglik_dense_oracle():
    rng = np.random.default_rng(1)
    p = random_params(rng)
    y, u = simulate(p, 3, rng)
    _, _, ym, yc = joint_marginals(p, y, u)
    assert kalman_filter(p, y, u).loglik == pytest.approx(gauss_logpdf(y.ravel(), ym, yc),
                                                          abs=1e-8)


@pytest.mark.parametrize("T", [2, 3, 4])
def test_smoother_matches_joint_conditioning(T):
    rng = np.random.default_rng(10 + T)
    p = random_params(rng)
    y, u = simulate(p, T, rng)
    sm = rts_smoother(p, kalman_filter(p, y, u))
    m, c, *_ = joint_marginals(p, y, u)
    D = 2
    np.testing.assert_allclose(sm.means, m, atol=1e-8)
    for t in range(T + 1):
        np.testing.assert_allclose(sm.covs[t], c[t * D:(t + 1) * D, t * D:(t + 1) * D],
                                   atol=1e-8)
    for t in range(1, T + 1):
        np.testing.assert_allclose(sm.cross_covs[t],
                                   c[t * D:(t + 1) * D, (t - 1) * D:t * D], atol=1e-8)


def test_last_step_smoothed_equals_filtered():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    y, u = simulate(p, 5, rng)
    filt = kalman_filter(p, y, u)
    sm = rts_smoother(p, filt)
    np.testing.assert_array_equal(sm.means[-1], filt.means[-1])
    np.testing.assert_array_equal(sm.covs[-1], filt.covs[-1])


def test_measurement_noise_recovery():
    rng = np.random.default_rng(3)
    true = LgssmParams.random_walk(2, 0.05, np.diag([0.8, 1.5]), [0.0, 0.0], 1.0)
    y, u = simulate(true, 2000, rng)
    init = LgssmParams.random_walk(2, 0.05, 4.0, [0.0, 0.0], 1.0)
    res = em_fit(y, u, init, iters=20, estimate=("R",))
    np.testing.assert_allclose(np.diag(res.params.measurement_noise), [0.8, 1.5], rtol=0.3)


def test_true_init_nearly_flat():
    rng = np.random.default_rng(4)
    true = LgssmParams.random_walk(2, 0.1, 1.0, [0.0, 0.0], 1.0)
    y, u = simulate(true, 400, rng)
    tr = np.array(em_fit(y, u, true, iters=5).loglik_trace)
    assert np.all(np.diff(tr) >= -1e-8)
    assert tr[-1] - tr[0] < 0.02 * abs(tr[0])


def test_single_iteration_hand_computed():
    p = LgssmParams.random_walk(1, 0.5, 1.0, [0.0], 1.0)
    y = np.array([[1.0], [2.5]])
    u = np.array([[0.5], [1.0]])
    new, _ = em_step(p, y, u)
    sm = rts_smoother(p, kalman_filter(p, y, u))
    m, P, C = sm.means[:, 0], sm.covs[:, 0, 0], sm.cross_covs[:, 0, 0]
    q = np.mean([(m[t] - m[t - 1] - u[t - 1, 0]) ** 2 + P[t] + P[t - 1] - 2 * C[t]
                 for t in (1, 2)])
    r = np.mean([(y[t - 1, 0] - m[t]) ** 2 + P[t] for t in (1, 2)])
    assert new.transition_noise[0, 0] == pytest.approx(q, abs=1e-12)
    assert new.measurement_noise[0, 0] == pytest.approx(r, abs=1e-12)


def test_control_as_offset_invariance():
    rng = np.random.default_rng(5)
    p = random_params(rng)
    y, u = simulate(p, 6, rng)
    a = kalman_filter(p, y, u)
    # fold the controls into a measurement offset by shifting the state
    shift = np.zeros((7, 2))
    for t in range(1, 7):
        shift[t] = p.transition_matrix @ shift[t - 1] + p.control_matrix @ u[t - 1]
    y2 = y - shift[1:] @ p.measurement_matrix.T
    b = kalman_filter(p, y2, None)
    np.testing.assert_allclose(a.means, b.means + shift, atol=1e-9)
    assert a.loglik == pytest.approx(b.loglik, abs=1e-9)


def test_em_detects_decrease():
    rng = np.random.default_rng(6)
    p = random_params(rng)
    y, u = simulate(p, 20, rng)
    with pytest.raises(ConsistencyError):
        em_fit(y, u, p, iters=3, estimate=("Q", "R"), tol=-1e9)


def test_validation():
    with pytest.raises(InvalidArgumentsError):
        LgssmParams.random_walk(2, 0.0, 1.0, [0, 0], 1.0)
    p = LgssmParams.random_walk(2, 1.0, 1.0, [0, 0], 1.0)
    with pytest.raises(InputShapeError):
        kalman_filter(p, np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(InvalidArgumentsError):
        em_fit(np.zeros((3, 2)), None, p, iters=0)


def test_json_round_trip():
    p = random_params(np.random.default_rng(7))
    back = LgssmParams.from_dict(p.to_dict())
    np.testing.assert_array_equal(back.transition_noise, p.transition_noise)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_em_monotone(seed):
    rng = np.random.default_rng(seed)
    true = random_params(rng)
    y, u = simulate(true, 30, rng)
    init = LgssmParams(true.transition_matrix, true.control_matrix, np.eye(2), true.measurement_matrix,
                       2 * np.eye(2), np.zeros(2), np.eye(2))
    tr = em_fit(y, u, init, iters=15, estimate=("Q", "R", "initial")).loglik_trace
    assert np.all(np.diff(tr) >= -1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_smoothed_cov_below_filtered(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng)
    y, u = simulate(p, 8, rng)
    filt = kalman_filter(p, y, u)
    sm = rts_smoother(p, filt)
    for t in range(9):
        assert np.linalg.eigvalsh(filt.covs[t] - sm.covs[t]).min() >= -1e-9
