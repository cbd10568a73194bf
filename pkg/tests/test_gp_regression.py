import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpssm_nav.errors import InputShapeError, InvalidArgumentsError
from gpssm_nav.gp_regression import (GpMeasurementModel, MeasurementSurface, default_init,
                                     lml_gradient, log_marginal_likelihood, log_params,
                                     optimize_measurement_gp, posterior_predict,
                                     with_log_params)
from gpssm_nav.kernel import ZERO_MEAN, SeArdHyper

from oracles import central_diff, condition, gauss_logpdf, rel_err, se_dense


def random_model(rng, n=5, dim=2, mean=None):
    X = rng.uniform(-3, 3, size=(n, dim))
    Y = X + rng.normal(0, 0.8, size=(n, dim))
    hypers = tuple(SeArdHyper(rng.uniform(0.3, 2.0), rng.uniform(0.5, 2.5, size=dim))
                   for _ in range(dim))
    noise = rng.uniform(0.05, 0.5, size=dim)
    kw = {} if mean is None else {"mean": mean}
    return GpMeasurementModel(X, Y, hypers, noise, **kw)


def dense_joint(model):
    """Full (N*Dy) covariance with outputs stacked as blocks, and the stacked mean."""
    X, Y = model.train_inputs, model.train_targets
    N, Dy = Y.shape
    cov = np.zeros((N * Dy, N * Dy))
    for d, h in enumerate(model.hypers):
        blk = slice(d * N, (d + 1) * N)
        cov[blk, blk] = se_dense(X, X, h.signal_variance, h.lengthscales)
    cov += np.kron(np.diag(model.noise_var), np.eye(N))
    mean = model.prior_mean(X).T.ravel()
    return mean, cov, Y.T.ravel()


def test_single_point_zero_residual():
    m = GpMeasurementModel([[2.0]], [[2.0]], (SeArdHyper(0.7, [1.0]),), [0.3])
    v = 0.7 + 0.3
    assert log_marginal_likelihood(m) == pytest.approx(-0.5 * np.log(2 * np.pi * v))


def test_duplicated_input_matches_2d_density():
    h = SeArdHyper(1.2, [0.9])
    m = GpMeasurementModel([[1.0], [1.0]], [[1.5], [1.5]], (h,), [0.2])
    cov = np.full((2, 2), 1.2) + 0.2 * np.eye(2)
    expected = gauss_logpdf([0.5, 0.5], [0.0, 0.0], cov)
    assert log_marginal_likelihood(m) == pytest.approx(expected, abs=1e-8)


def test_lml_dense_joint_oracle():
    rng = np.random.default_rng(11)
    m = random_model(rng, n=5)
    mean, cov, y = dense_joint(m)
    assert log_marginal_likelihood(m) == pytest.approx(gauss_logpdf(y, mean, cov), abs=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_lml_gradient_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    m = random_model(rng, n=int(rng.integers(3, 9)))
    theta = log_params(m)
    fd = central_diff(lambda t: log_marginal_likelihood(with_log_params(m, t)), theta, 1e-5)
    assert np.max(rel_err(lml_gradient(m), fd, floor=1e-6)) <= 1e-4


def test_duplicated_far_copy_doubles_lml_and_gradient():
    rng = np.random.default_rng(5)
    m = random_model(rng, n=6, mean=ZERO_MEAN)
    X2 = np.vstack([m.train_inputs, m.train_inputs + 1e4])
    Y2 = np.vstack([m.train_targets, m.train_targets])
    m2 = GpMeasurementModel(X2, Y2, m.hypers, m.noise_var, ZERO_MEAN)
    assert log_marginal_likelihood(m2) == pytest.approx(2 * log_marginal_likelihood(m), rel=1e-9)
    np.testing.assert_allclose(lml_gradient(m2), 2 * lml_gradient(m), rtol=1e-7, atol=1e-9)


def test_posterior_predict_dense_conditioning():
    rng = np.random.default_rng(7)
    m = random_model(rng, n=3)
    x_star = rng.normal(size=2)
    mean, cov = posterior_predict(m, x_star)
    X, Y = m.train_inputs, m.train_targets
    for d, h in enumerate(m.hypers):
        pts = np.vstack([X, x_star])
        joint = se_dense(pts, pts, h.signal_variance, h.lengthscales)
        joint += m.noise_var[d] * np.eye(4)
        prior = np.append(X[:, d], x_star[d])
        mu, var = condition(prior, joint, [0, 1, 2], Y[:, d])
        assert mean[d] == pytest.approx(mu[0], abs=1e-8)
        assert cov[d, d] == pytest.approx(var[0, 0], abs=1e-8)
    assert cov[0, 1] == 0.0


def test_noiseless_interpolation():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 5, size=(6, 2))
    Y = rng.normal(size=(6, 2))
    h = tuple(SeArdHyper(1.0, [1.0, 1.0]) for _ in range(2))
    m = GpMeasurementModel(X, Y, h, [1e-10, 1e-10])
    mean, _ = posterior_predict(m, X[2])
    np.testing.assert_allclose(mean, Y[2], atol=1e-4)


def test_prior_reversion_far_away():
    rng = np.random.default_rng(2)
    m = random_model(rng, n=5)
    x_star = np.array([500.0, -800.0])
    mean, cov = posterior_predict(m, x_star)
    np.testing.assert_allclose(mean, x_star, atol=1e-6)
    expected = np.diag([h.signal_variance for h in m.hypers]) + np.diag(m.noise_var)
    np.testing.assert_allclose(cov, expected, atol=1e-6)


def test_model_validation():
    h = (SeArdHyper(1.0, [1.0]),)
    with pytest.raises(InvalidArgumentsError):
        GpMeasurementModel([[0.0]], [[0.0]], h, [0.0])
    with pytest.raises(InputShapeError):
        GpMeasurementModel([[0.0], [1.0]], [[0.0]], h, [1.0])
    with pytest.raises(InputShapeError):
        GpMeasurementModel([[0.0]], [[0.0]], h, [1.0]).predict([[0.0, 1.0]])


def test_json_round_trip():
    m = random_model(np.random.default_rng(4))
    back = GpMeasurementModel.from_dict(m.to_dict())
    assert log_marginal_likelihood(back) == log_marginal_likelihood(m)


def test_default_init_uses_input_spread_and_residual_variance():
    rng = np.random.default_rng(8)
    X = rng.normal(0, [2.0, 5.0], size=(50, 2))
    Y = X + rng.normal(0, 1.0, size=(50, 2))
    hypers, noise = default_init(X, Y)
    np.testing.assert_allclose(hypers[0].lengthscales, X.std(axis=0))
    var = (Y - X).var(axis=0)
    np.testing.assert_allclose([h.signal_variance for h in hypers], var)
    np.testing.assert_allclose(noise, 0.1 * var)


def _sample_gp(seed, n=200, noise=0.25):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 10, size=(n, 2))
    h = SeArdHyper(1.0, [2.0, 3.0])
    K = se_dense(X, X, 1.0, h.lengthscales) + 1e-9 * np.eye(n)
    f = np.linalg.cholesky(K) @ rng.standard_normal(n)
    y = f + rng.normal(0, np.sqrt(noise), n)
    return X, y[:, None], h


def test_noise_recovery_from_known_gp():
    X, y, h = _sample_gp(0)
    m = optimize_measurement_gp(X, y, mean=ZERO_MEAN, restarts=1)
    assert 0.125 <= m.noise_var[0] <= 0.375


def test_ascent_from_generating_hyperparameters():
    X, y, h = _sample_gp(1, n=80)
    init = ((h,), np.array([0.25]))
    start = GpMeasurementModel(X, y, (h,), [0.25], ZERO_MEAN)
    fitted = optimize_measurement_gp(X, y, init=init, mean=ZERO_MEAN, restarts=2)
    assert log_marginal_likelihood(fitted) >= log_marginal_likelihood(start)


def test_optimum_is_stationary():
    X, y, _ = _sample_gp(2, n=40)
    fitted = optimize_measurement_gp(X, y, mean=ZERO_MEAN, restarts=1, method="BFGS")
    assert np.linalg.norm(lml_gradient(fitted)) < 1e-5 * len(X) * 10


def test_constant_targets_shrink_noise_monotonically():
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 5, size=(20, 1))
    y = np.full((20, 1), 2.0)
    init = ((SeArdHyper(1.0, [1.0]),), np.array([0.5]))
    fitted = optimize_measurement_gp(X, y, init=init, mean=ZERO_MEAN, restarts=1)
    assert fitted.noise_var[0] < 0.5
    trace = np.array(fitted.fit_info["lml_traces"][0])
    assert np.all(np.diff(trace) >= -1e-8)


def test_needs_two_points():
    with pytest.raises(InvalidArgumentsError):
        optimize_measurement_gp([[0.0]], [[0.0]])


def test_surface_matches_exact_model_at_grid_nodes_and_off_grid():
    rng = np.random.default_rng(9)
    m = random_model(rng, n=15)
    surf = MeasurementSurface.from_model(m, (-3.0, 3.0, -3.0, 3.0), cell=0.25, margin=1.0)
    nodes = np.array([[surf.xs[4], surf.ys[7]], [surf.xs[10], surf.ys[2]]])
    np.testing.assert_allclose(surf.predict(nodes)[0], m.predict(nodes)[0], atol=1e-10)
    far = np.array([[40.0, 40.0]])
    np.testing.assert_allclose(surf.predict(far)[0], m.predict(far)[0])
    y = np.array([0.3, -0.2])
    pts = rng.uniform(-2, 2, size=(30, 2))
    np.testing.assert_allclose(surf.log_likelihood(pts, y), m.log_likelihood(pts, y), rtol=0.05)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_predictive_variance_bounded_by_prior(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n=int(rng.integers(1, 8)))
    _, var = m.predict(rng.uniform(-6, 6, size=(10, 2)))
    bound = np.array([h.signal_variance for h in m.hypers]) + m.noise_var + 1e-9
    assert np.all(var <= bound)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adding_a_point_never_increases_variance(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n=int(rng.integers(1, 8)))
    x_new = rng.uniform(-3, 3, size=(1, 2))
    m2 = GpMeasurementModel(np.vstack([m.train_inputs, x_new]),
                            np.vstack([m.train_targets, rng.normal(size=(1, 2))]),
                            m.hypers, m.noise_var)
    test = rng.uniform(-4, 4, size=(10, 2))
    assert np.all(m2.predict(test)[1] <= m.predict(test)[1] + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lml_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n=int(rng.integers(2, 10)))
    p = rng.permutation(len(m.train_inputs))
    mp = GpMeasurementModel(m.train_inputs[p], m.train_targets[p], m.hypers, m.noise_var)
    assert log_marginal_likelihood(mp) == pytest.approx(log_marginal_likelihood(m), rel=1e-10)
