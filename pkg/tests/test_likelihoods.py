import numpy as np
import pytest
from scipy.special import log_ndtr as scipy_log_ndtr
from scipy.special import ndtr

from cases import random_probit_instance
from stochep.errors import DegenerateInput
from stochep.expfam import GaussianMoment
from stochep.likelihoods import (
    MoGModel,
    ProbitSite,
    inv_mills,
    log_ndtr,
    mog_tilted_update,
    probit_tilted_moments,
    tilted_moments_quadrature,
)
from stochep.oracle import GridSpec, grid_posterior_moments

STD = GaussianMoment([0.0], [[1.0]])

# Phi(theta)^2 phi(theta), integrated by a 1e6-point trapezoid rule on
# [-12, 12] and frozen; Z is exactly 1/3.
ALPHA2_LOG_Z = -1.0986122886681098
ALPHA2_MEAN = 0.8462843753216346
ALPHA2_VAR = 0.5594672037973671

# Two-component mixture site (m = [-1, 1], V = 0.25, sigma = 0.5, x = 0.5),
# from a 4001 x 4001 grid over [-6, 6]^2 and frozen.
MOG_G1 = 0.11920292202211728
MOG_MEANS = [-0.9105978084834112, 0.7798007305055272]
MOG_VARS = [0.29415852653670765, 0.14646246434048374]
MOG_LOG_Z = -1.3885841124415963


def test_log_ndtr_matches_scipy_across_branches():
    z = np.concatenate([np.linspace(-40, 40, 4001), [-6.0, 0.0, -1e-300, 1e-300]])
    np.testing.assert_allclose(log_ndtr(z), scipy_log_ndtr(z), rtol=1e-13, atol=1e-300)
    for v in (-38.5, -6.0, -3.0, 0.0, 2.5, 9.0):
        assert log_ndtr(v) == pytest.approx(float(scipy_log_ndtr(v)), rel=1e-13)
        assert isinstance(log_ndtr(v), float)


def test_log_ndtr_finite_deep_in_the_tail():
    z = np.array([-30.0, -38.0, -100.0])
    out = log_ndtr(z)
    assert np.all(np.isfinite(out))
    # asymptotic log Phi(z) ~ -z^2/2 - log(-z) - log(sqrt(2 pi))
    approx = -0.5 * z**2 - np.log(-z) - 0.5 * np.log(2 * np.pi)
    np.testing.assert_allclose(out, approx, rtol=1e-3)


def test_inverse_mills_ratio():
    z = np.linspace(-30, 8, 200)
    direct = np.exp(-0.5 * z**2 - 0.5 * np.log(2 * np.pi) - scipy_log_ndtr(z))
    np.testing.assert_allclose(inv_mills(z), direct, rtol=1e-10)
    assert inv_mills(0.0) == pytest.approx(np.sqrt(2 / np.pi))


def test_probit_closed_form_standard_case():
    res = probit_tilted_moments(STD, ProbitSite([1.0], 1))
    assert res.moments.mean[0] == pytest.approx(1 / np.sqrt(np.pi), abs=1e-14)
    assert res.moments.cov[0, 0] == pytest.approx(1 - 1 / np.pi, abs=1e-14)
    assert res.log_z == pytest.approx(np.log(0.5), abs=1e-15)


def test_zero_input_leaves_cavity_unchanged():
    cav = GaussianMoment([0.3, -0.2], [[1.0, 0.2], [0.2, 0.5]])
    for fn in (probit_tilted_moments, tilted_moments_quadrature):
        res = fn(cav, ProbitSite([0.0, 0.0], 1))
        np.testing.assert_allclose(res.moments.mean, cav.mean, atol=1e-15)
        np.testing.assert_allclose(res.moments.cov, cav.cov, atol=1e-15)
        assert res.log_z == pytest.approx(np.log(0.5))


def test_label_flip_mirrors_mean_at_zero_mean_cavity():
    rng = np.random.default_rng(1)
    cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    cav = GaussianMoment([0.0, 0.0], cov)
    x = rng.normal(size=2)
    pos = probit_tilted_moments(cav, ProbitSite(x, 1))
    neg = probit_tilted_moments(cav, ProbitSite(x, -1))
    np.testing.assert_allclose(pos.moments.mean, -neg.moments.mean, atol=1e-15)
    np.testing.assert_allclose(pos.moments.cov, neg.moments.cov, atol=1e-15)
    assert pos.log_z == neg.log_z


def test_finite_outputs_for_extreme_z():
    for m in (-30.0, -20.0, 20.0, 30.0):
        cav = GaussianMoment([m * np.sqrt(2)], [[1.0]])
        res = probit_tilted_moments(cav, ProbitSite([1.0], 1))
        assert np.isfinite(res.log_z)
        assert np.all(np.isfinite(res.moments.mean))
        assert 0 < res.moments.cov[0, 0] <= 1.0


def test_quadrature_alpha_one_matches_closed_form():
    res = tilted_moments_quadrature(STD, ProbitSite([1.0], 1))
    assert res.moments.mean[0] == pytest.approx(1 / np.sqrt(np.pi), abs=1e-12)
    assert res.moments.cov[0, 0] == pytest.approx(1 - 1 / np.pi, abs=1e-12)
    assert res.log_z == pytest.approx(np.log(0.5), abs=1e-12)


def test_quadrature_alpha_two_frozen_brute_force():
    res = tilted_moments_quadrature(STD, ProbitSite([1.0], 1), alpha=2.0)
    assert res.log_z == pytest.approx(ALPHA2_LOG_Z, abs=1e-9)
    assert res.log_z == pytest.approx(np.log(1 / 3), abs=1e-9)
    assert res.moments.mean[0] == pytest.approx(ALPHA2_MEAN, abs=1e-9)
    assert res.moments.cov[0, 0] == pytest.approx(ALPHA2_VAR, abs=1e-9)


@pytest.mark.parametrize("d", [1, 2, 4])
def test_closed_form_agrees_with_quadrature(d):
    rng = np.random.default_rng(10 + d)
    for _ in range(200):
        cav, site = random_probit_instance(rng, d)
        a = probit_tilted_moments(cav, site)
        b = tilted_moments_quadrature(cav, site)
        np.testing.assert_allclose(a.moments.mean, b.moments.mean, rtol=0, atol=1e-8)
        np.testing.assert_allclose(a.moments.cov, b.moments.cov, rtol=0, atol=1e-8)
        assert a.log_z == pytest.approx(b.log_z, abs=1e-8)


def test_closed_form_agrees_with_grid_in_one_dimension():
    rng = np.random.default_rng(20)
    for _ in range(50):
        cav, site = random_probit_instance(rng, 1)
        res = probit_tilted_moments(cav, site)
        sd = np.sqrt(cav.cov[0, 0])

        def logp(t, cav=cav, site=site):
            t = t[:, 0]
            return -0.5 * (t - cav.mean[0]) ** 2 / cav.cov[0, 0] + log_ndtr(site.y * site.x[0] * t)

        grid = grid_posterior_moments(logp, GridSpec.around(cav.mean, [sd], 12.0, 20001))
        assert res.moments.mean[0] == pytest.approx(grid.mean[0], abs=1e-4)
        assert res.moments.cov[0, 0] == pytest.approx(grid.cov[0, 0], abs=1e-4)


def test_tilted_variance_shrinks_along_x():
    rng = np.random.default_rng(30)
    for _ in range(300):
        cav, site = random_probit_instance(rng, int(rng.integers(1, 5)))
        for res in (probit_tilted_moments(cav, site),
                    tilted_moments_quadrature(cav, site, alpha=float(rng.uniform(0.2, 3)))):
            x = site.x
            assert x @ res.moments.cov @ x <= x @ cav.cov @ x * (1 + 1e-12)


def test_log_z_monotone_in_signed_margin():
    x = np.array([0.5, -1.0])
    cov = np.array([[1.0, 0.4], [0.4, 0.8]])
    direction = x / (x @ x)
    margins = np.linspace(-15, 15, 301)
    lz = [probit_tilted_moments(GaussianMoment(m * direction, cov), ProbitSite(x, 1)).log_z
          for m in margins]
    assert np.all(np.diff(lz) > 0)
    lz_neg = [probit_tilted_moments(GaussianMoment(-m * direction, cov), ProbitSite(x, -1)).log_z
              for m in margins]
    np.testing.assert_allclose(lz, lz_neg, rtol=1e-14)


def test_quadrature_wide_cavity():
    # x'Sigma x = 50 goes through the panel rule
    cav = GaussianMoment([1.0], [[50.0]])
    res = tilted_moments_quadrature(cav, ProbitSite([1.0], -1))
    ref = probit_tilted_moments(cav, ProbitSite([1.0], -1))
    assert res.moments.mean[0] == pytest.approx(ref.moments.mean[0], abs=1e-7)
    assert res.moments.cov[0, 0] == pytest.approx(ref.moments.cov[0, 0], abs=1e-7)


def test_quadrature_degenerate_projection_returns_cavity():
    cav = GaussianMoment([0.2, 0.1], [[1.0, 0.0], [0.0, 1e-20]])
    res = tilted_moments_quadrature(cav, ProbitSite([0.0, 1.0], 1), alpha=2.0)
    np.testing.assert_array_equal(res.moments.mean, cav.mean)
    assert res.log_z == pytest.approx(2.0 * float(np.log(ndtr(0.1))))


# -- mixture sites

def _two_cluster(m, v, sigma=0.5):
    cav = GaussianMoment(np.array(m, float)[:, None], np.array(v, float)[:, None, None])
    model = MoGModel(2, sigma, GaussianMoment([0.0], [[1.0]]))
    return cav, model


def test_mog_symmetric_midpoint():
    cav, model = _two_cluster([-1, 1], [0.25, 0.25])
    res, g = mog_tilted_update(cav, np.array([0.0]), model)
    np.testing.assert_allclose(g.weights, [0.5, 0.5], atol=1e-15)
    assert res.moments.mean[0, 0] == pytest.approx(-res.moments.mean[1, 0], abs=1e-15)
    assert res.moments.cov[0, 0, 0] == pytest.approx(res.moments.cov[1, 0, 0], abs=1e-15)


def test_mog_winner_take_all():
    cav, model = _two_cluster([-5, 5], [1e-6, 1e-6], sigma=0.1)
    x = np.array([-5.0])
    res, g = mog_tilted_update(cav, x, model)
    # the responsibility floor keeps the losing component at 1e-12
    assert g.weights[0] == pytest.approx(1.0, abs=1e-11)
    # single-component conditional update of block 0; block 1 untouched
    v, s2 = 1e-6, 0.01
    assert res.moments.cov[0, 0, 0] == pytest.approx(v - v * v / (v + s2), rel=1e-9)
    assert res.moments.mean[1, 0] == pytest.approx(5.0, abs=1e-9)
    assert res.moments.cov[1, 0, 0] == pytest.approx(1e-6, rel=1e-6)


def test_mog_frozen_grid_oracle():
    cav, model = _two_cluster([-1, 1], [0.25, 0.25])
    res, g = mog_tilted_update(cav, np.array([0.5]), model)
    assert g.weights[0] == pytest.approx(MOG_G1, abs=1e-6)
    np.testing.assert_allclose(res.moments.mean[:, 0], MOG_MEANS, atol=1e-6)
    np.testing.assert_allclose(res.moments.cov[:, 0, 0], MOG_VARS, atol=1e-6)
    assert res.log_z == pytest.approx(MOG_LOG_Z, abs=1e-6)


def test_mog_mean_is_responsibility_weighted_conditional():
    rng = np.random.default_rng(40)
    for _ in range(50):
        J, D = 3, 2
        m = rng.normal(size=(J, D))
        v = np.stack([np.eye(D) * rng.uniform(0.05, 1) for _ in range(J)])
        model = MoGModel(J, 0.5, GaussianMoment(np.zeros(D), np.eye(D)))
        x = rng.normal(size=D)
        res, g = mog_tilted_update(GaussianMoment(m, v), x, model)
        w = g.weights
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        s = v + 0.25 * np.eye(D)
        cond = m + np.einsum("jab,jb->ja", v @ np.linalg.inv(s), x - m)
        expected = w[:, None] * cond + (1 - w[:, None]) * m
        np.testing.assert_allclose(res.moments.mean, expected, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(res.moments.cov) > 0)


def test_mog_degenerate_input():
    cav, model = _two_cluster([-1, 1], [0.25, 0.25])
    with pytest.raises(DegenerateInput):
        mog_tilted_update(cav, np.array([1e200]), model)
