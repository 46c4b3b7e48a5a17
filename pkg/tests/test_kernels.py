'''Tests for the observation models: conjugate normal-gamma, NIW,
the flat prior-recovery kernel, grouped data handling, and the
Rao-Blackwellized predictive assembler.

Oracles are closed forms (Student-t predictives) or scipy quadratures,
never the package's own integration or sampling code.
'''

import math

import numpy as np
import pytest
from scipy import integrate as sci
from scipy import stats

from corm.kernels import (
    Dataset,
    FlatKernel,
    MultivariateNormalNIW,
    PredictiveSnapshot,
    UnivariateNormalGamma,
    predictive_density,
)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def test_dataset_promotes_vectors_to_columns():
    data = Dataset([np.arange(5.0), [1.0, 2.0]])
    assert data.groups[0].shape == (5, 1)
    assert data.groups[1].shape == (2, 1)
    assert data.dimension == 1
    assert data.n_groups == 2
    assert list(data.counts) == [5, 2]


def test_dataset_keeps_matrix_groups():
    data = Dataset([np.zeros((4, 3)), np.ones((2, 3))])
    assert data.dimension == 3
    assert data.stacked().shape == (6, 3)


def test_dataset_rejects_bad_input():
    with pytest.raises(ValueError):
        Dataset([])
    with pytest.raises(ValueError):
        Dataset([np.zeros((0, 2))])
    with pytest.raises(ValueError):
        Dataset([np.array([1.0, np.nan])])
    with pytest.raises(ValueError):
        Dataset([np.zeros((3, 2)), np.zeros((3, 4))])
    with pytest.raises(ValueError):
        Dataset([np.zeros((2, 2, 2))])


# ---------------------------------------------------------------------------
# Univariate conjugate kernel
# ---------------------------------------------------------------------------

KERN = UnivariateNormalGamma(m0=0.5, kappa0=2.0, a0=3.0, b0=1.5)


def brute_marginal(kernel, rows):
    '''Direct double quadrature of the integrated likelihood.'''
    rows = np.asarray(rows, dtype=float)

    def inner(tau):
        prec_mu = kernel.kappa0 * tau

        def over_mu(mu):
            like = np.prod(stats.norm.pdf(rows, mu, 1.0 / math.sqrt(tau)))
            prior_mu = stats.norm.pdf(mu, kernel.m0,
                                      1.0 / math.sqrt(prec_mu))
            return like * prior_mu

        val, _ = sci.quad(over_mu, -30.0, 30.0, limit=200)
        return val * stats.gamma.pdf(tau, kernel.a0, scale=1.0 / kernel.b0)

    val, _ = sci.quad(inner, 1e-9, 60.0, limit=200)
    return val


def test_single_observation_marginal_is_student_t():
    scale = math.sqrt(KERN.b0 * (KERN.kappa0 + 1.0)
                      / (KERN.a0 * KERN.kappa0))
    for y in (-1.3, 0.5, 2.7):
        want = stats.t.logpdf(y, 2.0 * KERN.a0, loc=KERN.m0, scale=scale)
        assert KERN.log_marginal([y]) == pytest.approx(want, rel=1e-12)


def test_marginal_matches_brute_quadrature():
    rows = [0.2, -0.7, 1.1, 0.4]
    want = brute_marginal(KERN, rows)
    assert KERN.marginal_likelihood(rows) == pytest.approx(want, rel=1e-6)


def test_empty_set_has_unit_marginal():
    assert KERN.log_marginal_stats(KERN.stats_empty()) == 0.0
    assert KERN.log_marginal([]) == 0.0


def test_predictive_is_marginal_ratio():
    rows = [0.2, -0.7, 1.1]
    stats_now = KERN.stats_empty()
    for y in rows:
        stats_now = KERN.stats_add(stats_now, y)
    for y in (-2.0, 0.0, 0.9):
        want = KERN.log_marginal(rows + [y]) - KERN.log_marginal(rows)
        assert KERN.log_predictive(y, stats_now) == pytest.approx(
            want, rel=1e-10)


def test_stats_add_remove_roundtrip():
    stats_now = KERN.stats_empty()
    for y in (0.3, -1.2, 2.2):
        stats_now = KERN.stats_add(stats_now, y)
    stats_now = KERN.stats_remove(stats_now, -1.2)
    stats_ref = KERN.stats_add(KERN.stats_add(KERN.stats_empty(), 0.3), 2.2)
    assert stats_now[0] == stats_ref[0]
    assert stats_now[1] == pytest.approx(stats_ref[1])
    assert stats_now[2] == pytest.approx(stats_ref[2])


def test_atom_posterior_draw_moments():
    rng = np.random.default_rng(5)
    rows = np.array([1.0, 1.4, 0.8, 1.2])
    stats_now = (rows.size, rows.sum(), np.square(rows).sum())
    mn, kn, an, bn = KERN._posterior(stats_now)
    draws = np.array([KERN.atom_posterior_draw(rows, rng)
                      for _ in range(4000)])
    mus, taus = draws[:, 0], draws[:, 1]
    assert mus.mean() == pytest.approx(mn, abs=4.0 * mus.std() / 63.0)
    assert taus.mean() == pytest.approx(an / bn, abs=4.0 * taus.std() / 63.0)


def test_log_density_matches_norm():
    mu, tau = 0.7, 2.5
    for y in (-1.0, 0.7, 3.0):
        want = stats.norm.logpdf(y, mu, 1.0 / math.sqrt(tau))
        assert KERN.log_density(y, (mu, tau)) == pytest.approx(want,
                                                               rel=1e-12)


def test_density_on_grid_consistent_with_log_density():
    grid = np.linspace(-3.0, 3.0, 7)
    vals = KERN.density_on_grid((0.7, 2.5), grid)
    want = [math.exp(KERN.log_density(x, (0.7, 2.5))) for x in grid]
    assert np.allclose(vals, want, rtol=1e-12)


def test_prior_predictive_integrates_to_one():
    grid = np.linspace(-40.0, 41.0, 4001)
    vals = KERN.prior_predictive_on_grid(grid)
    assert np.trapezoid(vals, grid) == pytest.approx(1.0, abs=2e-4)


def test_from_data_recipe():
    y = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    kern = UnivariateNormalGamma.from_data(y)
    assert kern.m0 == pytest.approx(2.0)
    assert kern.kappa0 == pytest.approx(0.01)
    assert kern.a0 == pytest.approx(5.5)
    assert kern.b0 == pytest.approx((2.0 / 9.0) * y.var(ddof=1))
    with pytest.raises(ValueError):
        UnivariateNormalGamma.from_data([1.0])


def test_hyperparameter_validation():
    for bad in ({'kappa0': 0.0}, {'a0': -1.0}, {'b0': 0.0}):
        args = dict(m0=0.0, kappa0=1.0, a0=1.0, b0=1.0)
        args.update(bad)
        with pytest.raises(ValueError):
            UnivariateNormalGamma(**args)


# ---------------------------------------------------------------------------
# Multivariate NIW kernel
# ---------------------------------------------------------------------------

def test_niw_from_data_recipe():
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(40, 2)) @ np.array([[1.0, 0.3], [0.0, 0.8]])
    kern = MultivariateNormalNIW.from_data(rows)
    assert np.allclose(kern.m0, rows.mean(axis=0))
    assert kern.lambda0 == pytest.approx(0.01)
    assert kern.nu0 == pytest.approx(12.0)
    cov = np.cov(rows, rowvar=False, ddof=1)
    assert np.allclose(kern.psi0, (4.0 / 9.0) * cov)


def test_niw_refuses_closed_marginal():
    kern = MultivariateNormalNIW(np.zeros(2), 1.0, 5.0, np.eye(2))
    with pytest.raises(TypeError):
        kern.log_marginal(np.zeros((3, 2)))
    assert kern.conjugate is False


def test_niw_validation():
    with pytest.raises(ValueError):
        MultivariateNormalNIW(np.zeros(2), 0.0, 5.0, np.eye(2))
    with pytest.raises(ValueError):
        MultivariateNormalNIW(np.zeros(2), 1.0, 1.0, np.eye(2))
    with pytest.raises(ValueError):
        MultivariateNormalNIW(np.zeros(2), 1.0, 5.0,
                              np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        MultivariateNormalNIW(np.zeros(2), 1.0, 5.0, np.eye(3))


def test_niw_posterior_draw_moments():
    rng = np.random.default_rng(9)
    kern = MultivariateNormalNIW(np.zeros(2), 2.0, 10.0, np.eye(2))
    rows = rng.multivariate_normal([1.0, -1.0], 0.3 * np.eye(2), 25)
    n = rows.shape[0]
    ln = kern.lambda0 + n
    nun = kern.nu0 + n
    ybar = rows.mean(axis=0)
    mn = (kern.lambda0 * kern.m0 + n * ybar) / ln
    centred = rows - ybar
    psin = kern.psi0 + centred.T @ centred \
        + (kern.lambda0 * n / ln) * np.outer(ybar - kern.m0, ybar - kern.m0)
    mus = np.array([kern.atom_posterior_draw(rows, rng)[0]
                    for _ in range(3000)])
    want_cov = psin / (nun - 2.0 - 1.0)
    se = np.sqrt(np.diag(want_cov) / ln / 3000.0)
    assert np.all(np.abs(mus.mean(axis=0) - mn) < 5.0 * se)


def test_niw_log_density_matches_scipy():
    kern = MultivariateNormalNIW(np.zeros(2), 1.0, 5.0, np.eye(2))
    cov = np.array([[0.8, 0.2], [0.2, 1.1]])
    mu = np.array([0.4, -0.9])
    for y in ([0.0, 0.0], [1.0, -2.0]):
        want = stats.multivariate_normal.logpdf(y, mu, cov)
        assert kern.log_density(y, (mu, cov)) == pytest.approx(want,
                                                               rel=1e-10)


# ---------------------------------------------------------------------------
# Flat kernel
# ---------------------------------------------------------------------------

def test_flat_kernel_is_unit():
    kern = FlatKernel()
    stats_now = kern.stats_add(kern.stats_empty(), 3.0)
    assert kern.log_marginal_stats(stats_now) == 0.0
    assert kern.log_predictive(1.0, stats_now) == 0.0
    assert kern.log_density(1.0, 0.5) == 0.0
    assert kern.marginal_likelihood([1.0, 2.0]) == 1.0
    assert np.all(kern.density_on_grid(0.5, np.zeros(4)) == 1.0)


# ---------------------------------------------------------------------------
# Predictive assembly
# ---------------------------------------------------------------------------

def test_predictive_density_weights_and_residual():
    kern = UnivariateNormalGamma(0.0, 1.0, 2.0, 1.0)
    grid = np.linspace(-25.0, 25.0, 2501)
    snaps = [
        PredictiveSnapshot(np.array([2.0, 1.0]),
                           [(-1.0, 4.0), (1.5, 4.0)], 0.5),
        PredictiveSnapshot(np.array([1.0, 0.0]),
                           [(-1.0, 4.0), (1.5, 4.0)], 0.0),
    ]
    dens = predictive_density(snaps, kern, 0, grid)
    assert dens.group == 0
    # hand-built mixture with the same weights
    comp = [kern.density_on_grid(atom, grid)
            for atom in [(-1.0, 4.0), (1.5, 4.0)]]
    prior = kern.prior_predictive_on_grid(grid)
    sweep1 = (2.0 * comp[0] + 1.0 * comp[1] + 0.5 * prior) / 3.5
    sweep2 = comp[0]
    assert np.allclose(dens.values, 0.5 * (sweep1 + sweep2), rtol=1e-10)
    assert np.trapezoid(dens.values, grid) == pytest.approx(1.0, abs=2e-4)


def test_predictive_density_skips_empty_sweeps():
    kern = UnivariateNormalGamma(0.0, 1.0, 2.0, 1.0)
    grid = np.linspace(-5.0, 5.0, 51)
    good = PredictiveSnapshot(np.array([1.0]), [(0.0, 1.0)], 0.0)
    dead = PredictiveSnapshot(np.array([0.0]), [(0.0, 1.0)], 0.0)
    dens = predictive_density([dead, good], kern, 0, grid)
    ref = predictive_density([good], kern, 0, grid)
    assert np.allclose(dens.values, ref.values)
    with pytest.raises(ValueError):
        predictive_density([dead], kern, 0, grid)
