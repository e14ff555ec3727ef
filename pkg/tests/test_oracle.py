import logging

import numpy as np
import pytest
from scipy.special import ndtr

from stochep.data import ProbitGenConfig, gen_probit
from stochep.errors import (
    ChainDiverged,
    ConfigInvalid,
    DegenerateInput,
    DimensionMismatch,
    EmptyTestSet,
    GridTooCoarse,
    NotNormalizable,
)
from stochep.expfam import GaussianMoment
from stochep.likelihoods import MoGModel, ProbitSite, probit_tilted_moments
from stochep.oracle import (
    GridSpec,
    McmcConfig,
    MixturePosterior,
    ProbitPosterior,
    Reference,
    calibration_kl,
    fit_gaussian,
    fnorm_errors,
    grid_posterior_moments,
    match_blocks,
    metropolis_sample,
    predictive_prob,
    split_rhat,
    test_metrics,
)


def gaussian_target(mu, var):
    mu = np.atleast_1d(mu)

    def logp(t):
        t = np.asarray(t)
        return -0.5 * np.sum((t - mu) ** 2, axis=-1) / var

    return logp


# -- MCMC

def test_mcmc_standard_normal():
    res = metropolis_sample(gaussian_target(0.0, 1.0), [0.0], McmcConfig(steps=50_000, seed=3))
    fit = fit_gaussian(res.samples)
    assert abs(fit.mean[0]) < 0.05
    assert 0.9 <= fit.cov[0, 0] <= 1.1
    assert 0.1 < res.acceptance < 0.6
    assert res.rhat < 1.1


def test_mcmc_shifted_scaled_normal():
    res = metropolis_sample(gaussian_target(3.0, 4.0), [0.0], McmcConfig(steps=100_000, seed=4))
    fit = fit_gaussian(res.samples)
    assert fit.mean[0] == pytest.approx(3.0, rel=0.05)
    assert fit.cov[0, 0] == pytest.approx(4.0, rel=0.05)


def test_mcmc_tiny_proposals_accept_almost_everything(caplog):
    cfg = McmcConfig(steps=4000, burn_in=1000, proposal_scale=1e-6, adapt=False, seed=1)
    with caplog.at_level(logging.WARNING, logger="stochep.oracle"):
        res = metropolis_sample(gaussian_target(0.0, 1.0), [0.0], cfg)
    assert res.acceptance > 0.99
    # each chain barely leaves its jittered start, so the chains disagree
    assert np.all(res.chain_samples.std(axis=1) < 1e-3)
    assert res.rhat > 1.1
    assert any("R-hat" in r.message for r in caplog.records)


def test_mcmc_error_shrinks_with_more_steps():
    target = gaussian_target(np.zeros(2), 1.0)
    errs = []
    for steps in (5_000, 20_000, 80_000):
        e = []
        for seed in range(6):
            res = metropolis_sample(target, np.zeros(2),
                                    McmcConfig(steps=steps, burn_in=steps // 5, seed=seed))
            e.append(np.sum(res.samples.mean(axis=0) ** 2))
        errs.append(np.sqrt(np.mean(e)))
    # quadrupling steps should roughly halve the RMS error; allow noise
    assert errs[1] < 0.8 * errs[0]
    assert errs[2] < 0.8 * errs[1]


def test_mcmc_is_deterministic_and_multichain():
    cfg = McmcConfig(steps=3000, burn_in=1000, seed=9)
    a = metropolis_sample(gaussian_target([1.0, -1.0], 0.5), np.zeros(2), cfg)
    b = metropolis_sample(gaussian_target([1.0, -1.0], 0.5), np.zeros(2), cfg)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.chain_samples.shape == (4, 2000, 2)
    np.testing.assert_array_equal(a.samples[:2000], a.chain_samples[0])


def test_mcmc_divergence_and_bad_start():
    def cliff(t):
        t = np.asarray(t)[..., 0]
        return np.where(np.abs(t) < 1e-9, 0.0, -np.inf)

    with pytest.raises(ChainDiverged):
        metropolis_sample(cliff, [0.0], McmcConfig(steps=2000, burn_in=500, init_jitter=0.0))
    with pytest.raises(ChainDiverged):
        metropolis_sample(lambda t: np.full(len(t), -np.inf), [0.0], McmcConfig(steps=100, burn_in=10))


def test_mcmc_config_validation():
    for kwargs in (dict(steps=100, burn_in=100), dict(proposal_scale=0.0), dict(chains=0)):
        with pytest.raises(ConfigInvalid):
            McmcConfig(**kwargs)


def test_split_rhat_flags_disagreeing_chains():
    rng = np.random.default_rng(0)
    good = rng.normal(size=(4, 500, 1))
    assert split_rhat(good) < 1.05
    bad = good + np.arange(4)[:, None, None] * 3.0
    assert split_rhat(bad) > 1.1
    drifting = good + np.linspace(0, 5, 500)[None, :, None]
    assert split_rhat(drifting) > 1.1


# -- fitting and metrics

def test_fit_gaussian_hand_example():
    fit = fit_gaussian([[1, 0], [-1, 0], [0, 1], [0, -1]])
    np.testing.assert_allclose(fit.mean, [0, 0], atol=1e-15)
    np.testing.assert_allclose(fit.cov, np.diag([2 / 3, 2 / 3]), atol=1e-15)


def test_fit_gaussian_errors():
    with pytest.raises(NotNormalizable):
        fit_gaussian(np.ones((10, 2)))
    with pytest.raises(DegenerateInput):
        fit_gaussian(np.eye(3))  # 3 samples, D + 2 = 5 needed


def test_fit_gaussian_affine_equivariance():
    rng = np.random.default_rng(1)
    s = rng.normal(size=(200, 3))
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=3)
    fit = fit_gaussian(s)
    moved = fit_gaussian(s @ a.T + b)
    np.testing.assert_allclose(moved.mean, a @ fit.mean + b, atol=1e-12)
    np.testing.assert_allclose(moved.cov, a @ fit.cov @ a.T, atol=1e-12)


def test_calibration_kl():
    ref = GaussianMoment(np.zeros(4), np.eye(4))
    assert calibration_kl(ref, ref) == 0.0
    collapsed = GaussianMoment(np.zeros(4), 0.01 * np.eye(4))
    assert calibration_kl(ref, collapsed) > 10
    assert calibration_kl(ref, collapsed) != calibration_kl(collapsed, ref)
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = rng.normal(size=(4, 4))
        q = GaussianMoment(rng.normal(size=4), a @ a.T + 0.1 * np.eye(4))
        assert calibration_kl(ref, q) >= 0


def test_fnorm_errors():
    a = GaussianMoment([0.0, 0.0], np.eye(2))
    assert fnorm_errors(a, a) == (0.0, 0.0)
    assert fnorm_errors(a, GaussianMoment([1.0, 0.0], np.eye(2)))[0] == pytest.approx(1.0)
    assert fnorm_errors(a, GaussianMoment([0.0, 0.0], np.eye(2) + np.diag([3.0, 4.0])))[1] == 5.0
    blocks = GaussianMoment(np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    moved = GaussianMoment(np.array([[1.0, 0.0], [0.0, 3.0]]), blocks.cov)
    assert fnorm_errors(blocks, moved)[0] == pytest.approx(2.0)
    with pytest.raises(DimensionMismatch):
        fnorm_errors(a, GaussianMoment([0.0], [[1.0]]))


def test_match_blocks_and_reference_alignment():
    ref_means = np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]])
    q_means = ref_means[[2, 0, 1]] + 0.1
    perm = match_blocks(ref_means, q_means)
    np.testing.assert_array_equal(perm, [2, 0, 1])
    cov = np.diag(np.arange(1.0, 7.0))
    ref = Reference(GaussianMoment(ref_means.reshape(-1), cov), (3,))
    q = GaussianMoment(ref_means[[2, 0, 1]], np.stack([np.eye(2)] * 3))
    aligned = ref.aligned(q)
    np.testing.assert_array_equal(aligned.mean, q.mean.reshape(-1))
    np.testing.assert_array_equal(np.diag(aligned.cov), [5, 6, 1, 2, 3, 4])
    out = ref.compare(q)
    assert out["mean_fnorm"] == 0.0
    assert Reference.from_dict(ref.to_dict()).moments.cov.tolist() == cov.tolist()
    with pytest.raises(DimensionMismatch):
        Reference(GaussianMoment(np.zeros(4), np.eye(4)), (2,)).aligned(q)


# -- grid oracle

def test_grid_no_data_returns_prior():
    prior = GaussianMoment([0.5], [[2.0]])
    post = ProbitPosterior(np.zeros((0, 1)), np.zeros(0), prior)
    m = grid_posterior_moments(post, GridSpec(((-15.0, 16.0),), (20001,)))
    assert m.mean[0] == pytest.approx(0.5, abs=1e-4)
    assert m.cov[0, 0] == pytest.approx(2.0, abs=1e-4)


def test_grid_single_probit_site():
    post = ProbitPosterior([[1.0]], [1], GaussianMoment([0.0], [[1.0]]))
    m = grid_posterior_moments(post, GridSpec(((-10.0, 10.0),), (20001,)))
    assert m.mean[0] == pytest.approx(1 / np.sqrt(np.pi), abs=1e-4)
    assert m.cov[0, 0] == pytest.approx(1 - 1 / np.pi, abs=1e-4)


def test_grid_two_dimensional_matches_closed_form():
    prior = GaussianMoment([0.2, -0.1], [[1.0, 0.3], [0.3, 0.5]])
    site = ProbitSite([0.7, -1.1], -1)
    exact = probit_tilted_moments(prior, site).moments
    post = ProbitPosterior([site.x], [site.y], prior)
    m = grid_posterior_moments(post, GridSpec(((-7.0, 7.0), (-6.0, 6.0)), (801, 801)))
    np.testing.assert_allclose(m.mean, exact.mean, atol=1e-4)
    np.testing.assert_allclose(m.cov, exact.cov, atol=1e-4)


def test_grid_resolution_self_convergence():
    data = gen_probit(ProbitGenConfig(N=8, D=1, seed=4))
    post = ProbitPosterior(data.inputs, data.labels, GaussianMoment([0.0], [[1.0]]))
    a = grid_posterior_moments(post, GridSpec(((-10.0, 10.0),), (10001,)))
    b = grid_posterior_moments(post, GridSpec(((-10.0, 10.0),), (20001,)))
    assert abs(a.mean[0] - b.mean[0]) < 1e-5
    assert abs(a.cov[0, 0] - b.cov[0, 0]) < 1e-5


def test_grid_too_coarse_and_limits():
    post = ProbitPosterior(np.zeros((0, 1)), np.zeros(0), GaussianMoment([0.0], [[1.0]]))
    with pytest.raises(GridTooCoarse):
        grid_posterior_moments(post, GridSpec(((-1.0, 1.0),), (101,)))
    with pytest.raises(ConfigInvalid):
        GridSpec(((0, 1),) * 3, (10,) * 3)
    with pytest.raises(ConfigInvalid):
        GridSpec(((0, 1),) * 2, (10_000, 10_000))


def test_mixture_posterior_on_grid():
    # J=2, D=1: the posterior over (mu_1, mu_2) is a 2-D grid problem
    model = MoGModel(2, 0.5, GaussianMoment([0.0], [[1.0]]))
    x = np.array([[-1.2], [-0.8], [1.1], [0.9], [1.0]])
    post = MixturePosterior(x, model)
    m = grid_posterior_moments(post, GridSpec(((-5.0, 5.0), (-5.0, 5.0)), (401, 401)))
    # exchangeable labels: the two marginals agree
    assert m.mean[0] == pytest.approx(m.mean[1], abs=1e-10)
    assert m.cov[0, 0] == pytest.approx(m.cov[1, 1], abs=1e-10)
    single = post(np.array([[-1.0, 1.0], [1.0, -1.0]]))
    assert single[0] == pytest.approx(single[1])


# -- predictive metrics

def test_predictive_probability_example():
    q = GaussianMoment([1.0], [[1.0]])
    assert predictive_prob(q, [[1.0]])[0] == pytest.approx(float(ndtr(1 / np.sqrt(2))))
    assert predictive_prob(q, [[1.0]])[0] == pytest.approx(0.7602, abs=1e-4)
    err, ll = test_metrics(q, [[1.0]], [1])
    assert err == 0.0 and ll == pytest.approx(np.log(ndtr(1 / np.sqrt(2))))


def test_zero_mean_predicts_half():
    q = GaussianMoment(np.zeros(2), np.diag([3.0, 0.2]))
    x = np.random.default_rng(0).normal(size=(10, 2))
    y = np.array([1, 1, 1, -1, -1, -1, -1, -1, -1, -1])
    np.testing.assert_allclose(predictive_prob(q, x), 0.5)
    err, ll = test_metrics(q, x, y)
    # z = 0 predicts -1, so the error is the share of positives
    assert err == pytest.approx(0.3)
    assert ll == pytest.approx(np.log(0.5))


def test_separable_toy_with_tight_q():
    theta = np.array([2.0, -1.0])
    x = np.random.default_rng(1).normal(size=(50, 2))
    y = np.where(x @ theta > 0, 1, -1)
    err, _ = test_metrics(GaussianMoment(theta * 10, 1e-6 * np.eye(2)), x, y)
    assert err == 0.0
    with pytest.raises(EmptyTestSet):
        test_metrics(GaussianMoment(theta, np.eye(2)), np.zeros((0, 2)), [])
