import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpssm_nav.errors import ConditioningError, InputShapeError
from gpssm_nav.gpssm import (GpssmModel, LinearGaussianMeasurement, NaturalParams, ParticleCloud,
                             elbo_hyper_gradient, elbo_terms, gaussian_kl, predictive_factors,
                             update_natural_params)
from gpssm_nav.gpssm.variational import inducing_kl, transition_moments
from gpssm_nav.kernel import SeArdHyper

from instances import random_spd, tiny_cloud, tiny_gpssm
from oracles import central_diff, condition, gauss_logpdf, rel_err, se_dense


def dense_kl(qm, qc, pm, pc):
    n = len(qm)
    Pinv = np.linalg.inv(pc)
    d = qm - pm
    return 0.5 * (np.trace(Pinv @ qc) + d @ Pinv @ d - n
                  + np.linalg.slogdet(pc)[1] - np.linalg.slogdet(qc)[1])


def dense_factors(model, xhat, d):
    h = model.hypers[d]
    Z = model.inducing_inputs
    K = se_dense(Z, Z, h.signal_variance, h.lengthscales)
    K += model.zfactors[d][1] * np.eye(len(Z))
    kx = se_dense(xhat, Z, h.signal_variance, h.lengthscales)[0]
    a = np.linalg.solve(K, kx)
    return a, h.signal_variance - a @ kx, K


def oracle_terms(model, cloud, u, y):
    """Straightforward per-particle, per-step evaluation of every surrogate term."""
    Dx = model.state_dim
    Z = model.inducing_inputs
    mZ = Z[:, :Dx] + Z[:, Dx:]
    w = cloud.weights
    neg_kl = 0.0
    for d in range(Dx):
        _, _, K = dense_factors(model, np.zeros((1, Z.shape[1])), d)
        neg_kl -= dense_kl(model.q_mean[d], model.q_cov[d], mZ[:, d], K)
    init = trans = meas = 0.0
    for s, traj in enumerate(cloud.trajectories):
        init += w[s] * gauss_logpdf(traj[0], y[0], model.initial_var * np.eye(Dx))
        for t in range(1, len(traj)):
            xhat = np.concatenate([traj[t - 1], u[t - 1]])[None]
            for d in range(Dx):
                a, b, _ = dense_factors(model, xhat, d)
                q = model.process_noise[d]
                mean = traj[t - 1, d] + u[t - 1, d] + a @ (model.q_mean[d] - mZ[:, d])
                trans += w[s] * (gauss_logpdf(traj[t, d], mean, [[q]])
                                 - 0.5 * (b + a @ model.q_cov[d] @ a) / q)
            meas += w[s] * gauss_logpdf(y[t - 1], traj[t], np.diag(model.measurement.noise_var))
    return neg_kl, init, trans, meas


# -- gaussian_kl -----------------------------------------------------------------

def test_kl_of_identical_gaussians_is_zero():
    rng = np.random.default_rng(0)
    m, c = rng.normal(size=3), random_spd(rng, 3)
    assert gaussian_kl((m, c), (m, c)) == pytest.approx(0.0, abs=1e-12)


def test_scalar_kl():
    assert gaussian_kl(([0.0], [[1.0]]), ([0.0], [[np.e]])) == pytest.approx(1 / (2 * np.e),
                                                                            abs=1e-12)


def test_kl_monte_carlo():
    rng = np.random.default_rng(1)
    qm, qc = rng.normal(size=4), random_spd(rng, 4)
    pm, pc = rng.normal(size=4), random_spd(rng, 4, 0.5)
    x = rng.multivariate_normal(qm, qc, size=10**6)

    def logpdf(x, m, c):
        L = np.linalg.cholesky(c)
        z = np.linalg.solve(L, (x - m).T)
        return -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 2 * np.log(2 * np.pi)
    diff = logpdf(x, qm, qc) - logpdf(x, pm, pc)
    se = diff.std() / np.sqrt(len(diff))
    assert abs(gaussian_kl((qm, qc), (pm, pc)) - diff.mean()) <= 3 * se


def test_kl_dense_oracle_and_errors():
    rng = np.random.default_rng(2)
    qm, qc = rng.normal(size=6), random_spd(rng, 6)
    pm, pc = rng.normal(size=6), random_spd(rng, 6)
    assert gaussian_kl((qm, qc), (pm, pc)) == pytest.approx(dense_kl(qm, qc, pm, pc), abs=1e-8)
    with pytest.raises(ConditioningError):
        gaussian_kl((qm, qc), (pm, np.zeros((6, 6))))
    with pytest.raises(InputShapeError):
        gaussian_kl((qm[:2], qc[:2, :2]), (pm, pc))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_kl_nonnegative_zero_iff_equal(seed, n):
    rng = np.random.default_rng(seed)
    qm, qc = rng.normal(size=n), random_spd(rng, n)
    pm, pc = rng.normal(size=n), random_spd(rng, n)
    assert gaussian_kl((qm, qc), (pm, pc)) > 1e-10
    assert gaussian_kl((qm, qc), (qm, qc)) <= 1e-10


# -- predictive factors ---------------------------------------------------------

def test_factors_at_inducing_input_are_one_hot():
    model = tiny_gpssm(np.random.default_rng(3), M=3)
    A, B = predictive_factors(model.inducing_inputs[1], model)
    M = 3
    for d in range(2):
        expect = np.zeros(2 * M)
        expect[d * M + 1] = 1.0
        np.testing.assert_allclose(A[d], expect, atol=1e-6)
    np.testing.assert_allclose(B, 0.0, atol=1e-6)


def test_factors_far_away_revert_to_prior():
    model = tiny_gpssm(np.random.default_rng(4))
    A, B = predictive_factors(np.full(4, 1e3), model)
    np.testing.assert_allclose(A, 0.0, atol=1e-12)
    np.testing.assert_allclose(B, np.diag([h.signal_variance for h in model.hypers]))


def test_factors_dense_conditioning_oracle():
    rng = np.random.default_rng(5)
    model = tiny_gpssm(rng, M=3)
    x = rng.normal(size=4)
    A, B = predictive_factors(x, model)
    for d, h in enumerate(model.hypers):
        pts = np.vstack([model.inducing_inputs, x])
        joint = se_dense(pts, pts, h.signal_variance, h.lengthscales)
        joint[:3, :3] += model.zfactors[d][1] * np.eye(3)
        v = rng.normal(size=3)
        mean, var = condition(np.zeros(4), joint, [0, 1, 2], v)
        assert A[d, d * 3:(d + 1) * 3] @ v == pytest.approx(mean[0], abs=1e-8)
        assert B[d, d] == pytest.approx(var[0, 0], abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_b_nonnegative(seed):
    rng = np.random.default_rng(seed)
    model = tiny_gpssm(rng, M=int(rng.integers(1, 6)))
    pts = np.vstack([model.inducing_inputs + 1e-7 * rng.normal(size=model.inducing_inputs.shape),
                     rng.normal(size=(5, 4))])
    for x in pts:
        _, B = predictive_factors(x, model)
        assert np.all(np.diag(B) >= 0)


def test_transition_moments_match_dense_factors():
    rng = np.random.default_rng(6)
    model = tiny_gpssm(rng)
    X = rng.normal(size=(4, 4))
    mean, logc = transition_moments(model, X)
    for p, x in enumerate(X):
        A, B = predictive_factors(x, model)
        mZ = model.inducing_inputs[:, :2] + model.inducing_inputs[:, 2:]
        expect = x[:2] + x[2:] + A @ (model.mu - mZ.T.ravel())
        np.testing.assert_allclose(mean[p], expect, atol=1e-10)
        tr = np.trace(np.diag(1 / model.process_noise) @ (B + A @ model.sigma @ A.T))
        assert logc[p] == pytest.approx(-0.5 * tr, abs=1e-10)


# -- natural parameters ---------------------------------------------------------

def test_empty_cloud_gives_prior():
    rng = np.random.default_rng(7)
    model = tiny_gpssm(rng)
    cloud = ParticleCloud(rng.normal(size=(4, 1, 2)), np.zeros(4))
    nat = update_natural_params(cloud, np.zeros((0, 2)), model)
    mean, cov = nat.to_moments()
    mZ = model.inducing_inputs[:, :2] + model.inducing_inputs[:, 2:]
    np.testing.assert_allclose(mean, mZ.T, atol=1e-8)
    for d in range(2):
        K = model.zfactors[d][2] + model.zfactors[d][1] * np.eye(3)
        np.testing.assert_allclose(cov[d], K, atol=1e-8)


def test_single_trajectory_hand_sums():
    rng = np.random.default_rng(8)
    model = tiny_gpssm(rng, M=2)
    traj = rng.normal(size=(1, 3, 2))
    u = rng.normal(size=(2, 2))
    nat = update_natural_params(ParticleCloud(traj, [0.0]), u, model)
    mZ = model.inducing_inputs[:, :2] + model.inducing_inputs[:, 2:]
    for d in range(2):
        q = model.process_noise[d]
        K = model.zfactors[d][2] + model.zfactors[d][1] * np.eye(2)
        Kinv = np.linalg.inv(K)
        eta1 = Kinv @ mZ[:, d]
        prec = Kinv.copy()
        for t in (1, 2):
            xhat = np.concatenate([traj[0, t - 1], u[t - 1]])[None]
            a, _, _ = dense_factors(model, xhat, d)
            eta1 = eta1 + a * (traj[0, t, d] - traj[0, t - 1, d] - u[t - 1, d] + a @ mZ[:, d]) / q
            prec = prec + np.outer(a, a) / q
        np.testing.assert_allclose(nat.eta1[d], eta1, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(nat.eta2[d], -0.5 * prec, rtol=1e-8, atol=1e-10)


def test_single_trajectory_is_bayesian_regression():
    """q*(v_d) equals dense conditioning of v_d on the observed transitions."""
    rng = np.random.default_rng(9)
    model = tiny_gpssm(rng, M=2)
    traj = rng.normal(size=(1, 4, 2))
    u = rng.normal(size=(3, 2))
    mean, cov = update_natural_params(ParticleCloud(traj, [0.0]), u, model).to_moments()
    mZ = model.inducing_inputs[:, :2] + model.inducing_inputs[:, 2:]
    for d in range(2):
        K = model.zfactors[d][2] + model.zfactors[d][1] * np.eye(2)
        rows = [dense_factors(model, np.concatenate([traj[0, t - 1], u[t - 1]])[None], d)[0]
                for t in (1, 2, 3)]
        Amat = np.array(rows)
        offs = traj[0, :3, d] + u[:, d] - Amat @ mZ[:, d]
        joint = np.block([[K, K @ Amat.T],
                          [Amat @ K, Amat @ K @ Amat.T + model.process_noise[d] * np.eye(3)]])
        m, c = condition(np.concatenate([mZ[:, d], offs + Amat @ mZ[:, d]]), joint, [2, 3, 4],
                         traj[0, 1:, d])
        np.testing.assert_allclose(mean[d], m, atol=1e-8)
        np.testing.assert_allclose(cov[d], c, atol=1e-8)


def test_duplicated_particles_match_single():
    rng = np.random.default_rng(10)
    model = tiny_gpssm(rng)
    traj = rng.normal(size=(1, 3, 2))
    u = rng.normal(size=(2, 2))
    one = update_natural_params(ParticleCloud(traj, [0.0]), u, model)
    many = update_natural_params(ParticleCloud(np.repeat(traj, 5, axis=0), np.zeros(5)), u, model)
    np.testing.assert_allclose(many.eta1, one.eta1, rtol=1e-12)
    np.testing.assert_allclose(many.eta2, one.eta2, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_natural_moment_round_trip(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 5))
    mean = rng.normal(size=(2, M))
    cov = np.stack([random_spd(rng, M) for _ in range(2)])
    nat = NaturalParams.from_moments(mean, cov)
    m2, c2 = nat.to_moments()
    np.testing.assert_allclose(c2, cov, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(m2, mean, rtol=1e-8, atol=1e-10)
    for d in range(2):
        np.testing.assert_allclose(np.linalg.inv(-2 * nat.eta2[d]), c2[d], rtol=1e-8,
                                   atol=1e-10)
        np.testing.assert_allclose(c2[d] @ nat.eta1[d], m2[d], rtol=1e-8, atol=1e-10)


# -- ELBO terms -----------------------------------------------------------------

def test_prior_posterior_has_zero_kl():
    model = tiny_gpssm(np.random.default_rng(11)).with_prior_posterior()
    assert inducing_kl(model) == pytest.approx(0.0, abs=1e-9)
    cloud, u, y = tiny_cloud(np.random.default_rng(0), 3, 2)
    assert elbo_terms(cloud, u, model, measurements=y).neg_kl == pytest.approx(0.0, abs=1e-9)


def test_measurement_term_maximal_at_exact_fit():
    rng = np.random.default_rng(12)
    model = tiny_gpssm(rng)
    model = GpssmModel(model.hypers, model.process_noise, model.inducing_inputs, model.q_mean,
                       model.q_cov, LinearGaussianMeasurement(np.eye(2), [1e-6, 1e-6]))
    traj = rng.normal(size=(1, 3, 2))
    cloud = ParticleCloud(traj, [0.0])
    u = rng.normal(size=(2, 2))
    y = traj[0, 1:]
    best = elbo_terms(cloud, u, model, measurements=y).measurement
    assert best == pytest.approx(2 * (-np.log(2 * np.pi * 1e-6)), rel=1e-12)
    for _ in range(5):
        pert = y + 1e-3 * rng.normal(size=y.shape)
        assert elbo_terms(cloud, u, model, measurements=pert).measurement < best


@pytest.mark.parametrize("seed", range(3))
def test_terms_match_straightforward_oracle(seed):
    rng = np.random.default_rng(20 + seed)
    model = tiny_gpssm(rng, M=2)
    cloud, u, y = tiny_cloud(rng, 3, 2)
    terms = elbo_terms(cloud, u, model, measurements=y)
    oracle = oracle_terms(model, cloud, u, y)
    np.testing.assert_allclose([terms.neg_kl, terms.initial, terms.transition, terms.measurement],
                               oracle, rtol=1e-9, atol=1e-9)
    assert terms.total == pytest.approx(sum(oracle), rel=1e-9)


def test_natural_argument_overrides_posterior():
    rng = np.random.default_rng(13)
    model = tiny_gpssm(rng)
    cloud, u, y = tiny_cloud(rng, 3, 2)
    nat = update_natural_params(cloud, u, model)
    a = elbo_terms(cloud, u, model, natural=nat, measurements=y)
    b = elbo_terms(cloud, u, model.with_posterior(*nat.to_moments()), measurements=y)
    assert a.total == pytest.approx(b.total, rel=1e-12)


# -- gradients ------------------------------------------------------------------

def _fixed_cloud_objective(model, cloud, u, y, wrt_inducing):
    return lambda th: elbo_terms(cloud, u, model.with_log_params(th, wrt_inducing),
                                 measurements=y).total


@pytest.mark.parametrize("seed", range(12))
def test_gradient_finite_differences(seed):
    rng = np.random.default_rng(40 + seed)
    model = tiny_gpssm(rng, M=int(rng.integers(1, 4)))
    cloud, u, y = tiny_cloud(rng, 4, int(rng.integers(1, 4)))
    theta = model.log_params(True)
    g = elbo_hyper_gradient(cloud, u, model, wrt_inducing=True).flat()
    fd = central_diff(_fixed_cloud_objective(model, cloud, u, y, True), theta, 1e-5)
    assert np.max(rel_err(g, fd, floor=1e-6)) <= 1e-3


def test_gradient_without_inducing_is_prefix():
    rng = np.random.default_rng(14)
    model = tiny_gpssm(rng)
    cloud, u, _ = tiny_cloud(rng, 3, 2)
    full = elbo_hyper_gradient(cloud, u, model, wrt_inducing=True)
    part = elbo_hyper_gradient(cloud, u, model, wrt_inducing=False)
    assert part.inducing_inputs is None
    np.testing.assert_allclose(part.flat(), full.flat()[:len(part.flat())])


def test_process_noise_stationary_at_closed_form():
    rng = np.random.default_rng(15)
    model = tiny_gpssm(rng)
    cloud, u, _ = tiny_cloud(rng, 5, 3)
    # the residual and trace terms do not depend on Q, so q_d* is their weighted mean
    w = cloud.weights
    mZ = model.inducing_inputs[:, :2] + model.inducing_inputs[:, 2:]
    q_star = np.zeros(2)
    for s, traj in enumerate(cloud.trajectories):
        for t in range(1, 4):
            x = np.concatenate([traj[t - 1], u[t - 1]])
            for d in range(2):
                a, b, _ = dense_factors(model, x[None], d)
                e = traj[t, d] - traj[t - 1, d] - u[t - 1, d] - a @ (model.q_mean[d] - mZ[:, d])
                q_star[d] += w[s] * (e * e + b + a @ model.q_cov[d] @ a) / 3
    theta = model.log_params()
    theta[-2:] = np.log(q_star)
    g = elbo_hyper_gradient(cloud, u, model.with_log_params(theta), wrt_inducing=False)
    assert np.linalg.norm(g.log_process_noise) < 1e-9


def test_doubling_process_noise_scalar_case():
    rng = np.random.default_rng(16)
    model = tiny_gpssm(rng)
    cloud, u, _ = tiny_cloud(rng, 1, 1)
    g1 = elbo_hyper_gradient(cloud, u, model).log_process_noise
    theta = model.log_params()
    theta[-2:] += np.log(2.0)
    g2 = elbo_hyper_gradient(cloud, u, model.with_log_params(theta)).log_process_noise
    # d/dlog q of -1/2 c/q - 1/2 log q is c/(2q) - 1/2, so (g + 1/2) halves when q doubles
    np.testing.assert_allclose(g2 + 0.5, 0.5 * (g1 + 0.5), rtol=1e-10)


@pytest.mark.parametrize("seed", range(12))
def test_full_natural_update_never_decreases_surrogate(seed):
    rng = np.random.default_rng(60 + seed)
    model = tiny_gpssm(rng, M=int(rng.integers(1, 4)))
    cloud, u, y = tiny_cloud(rng, 4, int(rng.integers(1, 4)))
    before = elbo_terms(cloud, u, model, measurements=y).total
    after = elbo_terms(cloud, u, model, natural=update_natural_params(cloud, u, model),
                       measurements=y).total
    assert after >= before - 1e-6


def test_model_json_round_trip():
    rng = np.random.default_rng(17)
    model = tiny_gpssm(rng)
    back = GpssmModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.sigma, model.sigma)
    np.testing.assert_array_equal(back.mu, model.mu)
    assert back.hypers[1].signal_variance == model.hypers[1].signal_variance
    cloud, u, y = tiny_cloud(rng, 2, 2)
    assert elbo_terms(cloud, u, back, measurements=y).total == \
        elbo_terms(cloud, u, model, measurements=y).total


def test_model_validation():
    h = (SeArdHyper(1.0, np.ones(4)),) * 2
    meas = LinearGaussianMeasurement(np.eye(2), [1.0, 1.0])
    with pytest.raises(Exception):
        GpssmModel(h, [1.0, 0.0], np.zeros((1, 4)), np.zeros((2, 1)), np.ones((2, 1, 1)), meas)
    with pytest.raises(InputShapeError):
        GpssmModel(h, [1.0, 1.0], np.zeros((2, 4)), np.zeros((2, 1)), np.ones((2, 1, 1)), meas)


def test_cloud_weights_normalised():
    c = ParticleCloud(np.zeros((3, 2, 2)), [1.0, 2.0, 3.0])
    assert c.weights.sum() == pytest.approx(1.0, abs=1e-12)
