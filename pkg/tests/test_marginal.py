'''Tests for the urn-style marginal sampler.

Oracles are independent of the package quadrature: the closed kappa
forms are re-derived here from the Laplace-exponent derivatives, the
quadrature fallback is checked against QUADPACK on the defining
integrand, and the urn conditional is checked against brute-force
enumeration of the partition posterior on tiny datasets.
'''

import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import gammaln

from corm import marginal_sampler as ms
from corm.core import CoRMSpec, MarginalFamily
from corm.kernels import (
    Dataset,
    FlatKernel,
    MultivariateNormalNIW,
    UnivariateNormalGamma,
)
from corm.marginal_sampler import (
    AdaptiveStepSize,
    KappaTable,
    MarginalState,
    allocation_weights,
    initial_state,
    marginal_sweep,
    update_allocation_conjugate,
    update_allocation_nonconjugate,
    update_atoms,
    update_shape_marginal,
    update_v_marginal,
)


def gamma_spec(dimension, shape, mass=1.0):
    return CoRMSpec.from_marginal(dimension, shape, MarginalFamily.gamma(),
                                  centring_mass=mass)


def kappa_quad_gamma(a, v, shape):
    '''QUADPACK oracle for the one-group gamma-marginal kappa integral,
    algebraic endpoint weights z^(a-1) (1-z)^(shape-1).'''
    const = math.exp(gammaln(shape + a) - gammaln(shape))

    def g(z):
        return (1.0 + v * z) ** -(shape + a)

    val, _ = integrate.quad(g, 0.0, 1.0, weight='alg',
                            wvar=(a - 1.0, shape - 1.0))
    return const * val


def kappa_quad_gamma_d2(a, v, shape):
    '''QUADPACK oracle for the two-group gamma-marginal kappa integral.'''
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    const = math.exp(float(np.sum(gammaln(shape + a) - gammaln(shape))))

    def g(z):
        out = 1.0
        for aj, vj in zip(a, v):
            out = out * (1.0 + vj * z) ** -(shape + aj)
        return out

    val, _ = integrate.quad(g, 0.0, 1.0, weight='alg',
                            wvar=(float(a.sum()) - 1.0, shape - 1.0))
    return const * val


def kappa_quad_stable(a, v, shape, sigma):
    '''QUADPACK oracle for the one-group sigma-stable kappa integral.'''
    const = math.exp(gammaln(shape + a) - gammaln(shape)
                     + math.log(sigma) + gammaln(shape)
                     - gammaln(shape + sigma) - gammaln(1.0 - sigma))

    def f(z):
        return z ** (a - sigma - 1.0) * (1.0 + v * z) ** -(shape + a)

    val = integrate.quad(f, 0.0, 1.0)[0] + integrate.quad(f, 1.0, np.inf)[0]
    return const * val


def kappa_quad_gg(a, v, shape, sigma, rate):
    '''QUADPACK oracle for the one-group generalized-gamma kappa
    integral, weights z^(a-sigma-1) (1/rate - z)^(sigma+shape-1).'''
    beta = sigma + shape
    const = math.exp(gammaln(shape + a) - gammaln(shape)
                     + math.log(sigma) + gammaln(shape)
                     - gammaln(shape + sigma) - gammaln(1.0 - sigma)
                     + (beta - 1.0) * math.log(rate))

    def g(z):
        return (1.0 + v * z) ** -(shape + a)

    val, _ = integrate.quad(g, 0.0, 1.0 / rate, weight='alg',
                            wvar=(a - sigma - 1.0, beta - 1.0))
    return const * val


def ng_log_marginal(y, m0, k0, a0, b0):
    '''Closed normal-gamma marginal likelihood, written out directly.'''
    y = np.asarray(y, dtype=float)
    n = y.size
    kn = k0 + n
    an = a0 + 0.5 * n
    ybar = float(y.mean())
    ss = float(np.sum((y - ybar) ** 2))
    bn = b0 + 0.5 * ss + 0.5 * k0 * n * (ybar - m0) ** 2 / kn
    return (-0.5 * n * math.log(2.0 * math.pi)
            + 0.5 * (math.log(k0) - math.log(kn))
            + gammaln(an) - gammaln(a0)
            + a0 * math.log(b0) - an * math.log(bn))


class TestKappaTable:

    def test_gamma_closed_form_vs_quadrature(self):
        for shape in (1.0, 2.5):
            spec = gamma_spec(1, shape)
            for v in (0.4, 1.0, 3.7):
                table = KappaTable(spec, np.array([v]))
                for a in (1, 2, 5):
                    got = table.log_kappa((a,))
                    closed = gammaln(a) - a * math.log1p(v)
                    oracle = math.log(kappa_quad_gamma(a, v, shape))
                    assert got == pytest.approx(closed, rel=1e-12)
                    assert got == pytest.approx(oracle, rel=1e-9)

    def test_gamma_closed_form_is_shape_free(self):
        # the shape dependence cancels exactly in the gamma marginal
        for shape in (0.7, 1.0, 4.0):
            oracle = math.log(kappa_quad_gamma(3, 1.2, shape))
            closed = gammaln(3) - 3.0 * math.log1p(1.2)
            assert oracle == pytest.approx(closed, rel=1e-9)

    def test_stable_closed_form_vs_quadrature(self):
        for sigma in (0.3, 0.5):
            for shape in (1.0, 2.0):
                spec = CoRMSpec.from_marginal(
                    1, shape, MarginalFamily.sigma_stable(sigma))
                for v in (0.5, 2.0):
                    table = KappaTable(spec, np.array([v]))
                    for a in (1, 3):
                        got = table.log_kappa((a,))
                        closed = (math.log(sigma) + gammaln(a - sigma)
                                  - gammaln(1.0 - sigma)
                                  + (sigma - a) * math.log(v))
                        oracle = math.log(
                            kappa_quad_stable(a, v, shape, sigma))
                        assert got == pytest.approx(closed, rel=1e-12)
                        assert got == pytest.approx(oracle, rel=1e-8)

    def test_gg_quadrature_path_vs_closed_derivative(self):
        # kappa_n(v) = sigma Gamma(n-sigma)/Gamma(1-sigma) (a+v)^(sigma-n)
        # from the n-th derivative of the marginal exponent
        sigma, rate, shape = 0.4, 2.0, 1.5
        spec = CoRMSpec.from_marginal(
            1, shape, MarginalFamily.generalized_gamma(sigma, rate))
        for v in (0.7, 1.3):
            table = KappaTable(spec, np.array([v]))
            for n in (1, 2, 4):
                got = table.log_kappa((n,))
                closed = (math.log(sigma) + gammaln(n - sigma)
                          - gammaln(1.0 - sigma)
                          + (sigma - n) * math.log(rate + v))
                assert got == pytest.approx(closed, rel=1e-8)

    def test_gg_quadrature_path_vs_quadpack(self):
        sigma, rate, shape = 0.4, 2.0, 1.5
        spec = CoRMSpec.from_marginal(
            1, shape, MarginalFamily.generalized_gamma(sigma, rate))
        table = KappaTable(spec, np.array([0.9]))
        for n in (1, 4):
            got = table.log_kappa((n,))
            oracle = math.log(kappa_quad_gg(n, 0.9, shape, sigma, rate))
            assert got == pytest.approx(oracle, rel=1e-7)

    def test_two_group_quadrature_vs_quadpack(self):
        shape = 1.8
        spec = gamma_spec(2, shape)
        v = np.array([0.5, 1.5])
        table = KappaTable(spec, v)
        for a in ((2, 1), (0, 3), (1, 1)):
            got = table.log_kappa(a)
            oracle = math.log(kappa_quad_gamma_d2(a, v, shape))
            assert got == pytest.approx(oracle, rel=1e-7)

    def test_ratio_and_new_cluster_consistency(self):
        spec = gamma_spec(2, 1.3, mass=2.0)
        table = KappaTable(spec, np.array([0.8, 1.1]))
        a = (2, 1)
        assert table.log_ratio(a, 0) == pytest.approx(
            table.log_kappa((3, 1)) - table.log_kappa(a), rel=1e-12)
        assert table.log_ratio(a, 1) == pytest.approx(
            table.log_kappa((2, 2)) - table.log_kappa(a), rel=1e-12)
        assert table.log_new_cluster(0) == pytest.approx(
            table.log_kappa((1, 0)), rel=1e-12)
        assert table.log_new_cluster(1) == pytest.approx(
            table.log_kappa((0, 1)), rel=1e-12)

    def test_memoization_returns_same_value(self):
        spec = gamma_spec(1, 1.0)
        table = KappaTable(spec, np.array([1.0]))
        first = table.log_kappa((3,))
        assert table.log_kappa((3,)) == first
        assert (3,) in table._memo


def make_state_d1(labels, v, shape, kernel, data):
    '''Build a one-group state from labels; -1 marks a detached entry.'''
    labels = np.asarray(labels)
    K = int(labels.max()) + 1
    counts = np.zeros((K, 1), dtype=int)
    for lab in labels:
        if lab >= 0:
            counts[lab, 0] += 1
    state = MarginalState([labels.copy()], counts, np.array([float(v)]),
                          shape)
    state.stats = []
    for k in range(K):
        s = kernel.stats_empty()
        for i, lab in enumerate(labels):
            if lab == k:
                s = kernel.stats_add(s, data.groups[0][i, 0])
        state.stats.append(s)
    return state


class TestUrnWeights:

    def test_gamma_urn_reduces_to_classic_weights(self):
        # with a gamma marginal and a flat kernel the urn weights are
        # (n_1, ..., n_K, M) up to a common factor, whatever v is
        kernel = FlatKernel()
        data = Dataset([np.zeros(6)])
        for shape in (1.0, 2.3):
            for mass in (0.7, 1.0, 4.0):
                spec = gamma_spec(1, shape, mass=mass)
                reference = None
                for v in (0.25, 1.0, 9.0):
                    state = make_state_d1([0, 0, 0, 1, 1, -1], v, shape,
                                          kernel, data)
                    table = KappaTable(spec, state.v)
                    w = allocation_weights(state, data, spec, kernel,
                                           0, 5, table)
                    w = w / w.sum()
                    expected = np.array([3.0, 2.0, mass])
                    expected /= expected.sum()
                    assert np.allclose(w, expected, rtol=1e-12)
                    if reference is None:
                        reference = w
                    assert np.allclose(w, reference, rtol=1e-12)

    def test_conditional_matches_enumeration_one_group(self):
        # Gibbs weights for the last observation against the exact
        # conditional computed from the partition posterior
        shape, mass, v = 1.6, 1.3, 0.8
        m0, k0, a0, b0 = 0.0, 0.5, 2.0, 1.5
        kernel = UnivariateNormalGamma(m0, k0, a0, b0)
        spec = gamma_spec(1, shape, mass=mass)
        y = np.array([-0.5, 0.1, 2.0])
        data = Dataset([y])

        def kap(n):
            return math.exp(gammaln(n) - n * math.log1p(v))

        def m(idx):
            return math.exp(ng_log_marginal(y[list(idx)], m0, k0, a0, b0))

        # first two observations share a cluster
        state = make_state_d1([0, 0, -1], v, shape, kernel, data)
        table = KappaTable(spec, state.v)
        w = allocation_weights(state, data, spec, kernel, 0, 2, table)
        w = w / w.sum()
        joint = np.array([
            mass * kap(3) * m((0, 1, 2)),
            mass ** 2 * kap(2) * kap(1) * m((0, 1)) * m((2,)),
        ])
        assert np.allclose(w, joint / joint.sum(), rtol=1e-9)

        # first two observations apart
        state = make_state_d1([0, 1, -1], v, shape, kernel, data)
        table = KappaTable(spec, state.v)
        w = allocation_weights(state, data, spec, kernel, 0, 2, table)
        w = w / w.sum()
        joint = np.array([
            mass ** 2 * kap(2) * kap(1) * m((0, 2)) * m((1,)),
            mass ** 2 * kap(1) * kap(2) * m((0,)) * m((1, 2)),
            mass ** 3 * kap(1) ** 3 * m((0,)) * m((1,)) * m((2,)),
        ])
        assert np.allclose(w, joint / joint.sum(), rtol=1e-9)

    def test_conditional_matches_enumeration_two_groups(self):
        # same check across groups, with the kappa oracle on QUADPACK
        shape, mass = 2.0, 1.0
        v = np.array([0.6, 1.4])
        m0, k0, a0, b0 = 0.0, 0.5, 2.0, 1.5
        kernel = UnivariateNormalGamma(m0, k0, a0, b0)
        spec = gamma_spec(2, shape, mass=mass)
        y0 = np.array([0.3, -1.0])
        y1 = np.array([1.1])
        data = Dataset([y0, y1])

        labels = [np.array([0, 1]), np.array([-1])]
        counts = np.array([[1, 0], [1, 0]])
        state = MarginalState(labels, counts, v.copy(), shape)
        state.stats = [kernel.stats_add(kernel.stats_empty(), y0[0]),
                       kernel.stats_add(kernel.stats_empty(), y0[1])]
        table = KappaTable(spec, state.v)
        w = allocation_weights(state, data, spec, kernel, 1, 0, table)
        w = w / w.sum()

        def kap(a):
            return kappa_quad_gamma_d2(a, v, shape)

        def m(values):
            return math.exp(ng_log_marginal(values, m0, k0, a0, b0))

        joint = np.array([
            mass ** 2 * kap((1, 1)) * kap((1, 0))
            * m([y0[0], y1[0]]) * m([y0[1]]),
            mass ** 2 * kap((1, 0)) * kap((1, 1))
            * m([y0[0]]) * m([y0[1], y1[0]]),
            mass ** 3 * kap((1, 0)) ** 2 * kap((0, 1))
            * m([y0[0]]) * m([y0[1]]) * m([y1[0]]),
        ])
        assert np.allclose(w, joint / joint.sum(), rtol=1e-6)

    def test_gibbs_update_frequencies_match_conditional(self):
        # repeated single-site updates are iid draws from the urn
        # conditional; hold the rest of the partition fixed
        shape, mass, v = 1.0, 1.5, 0.9
        m0, k0, a0, b0 = 0.0, 0.5, 2.0, 1.5
        kernel = UnivariateNormalGamma(m0, k0, a0, b0)
        spec = gamma_spec(1, shape, mass=mass)
        y = np.array([-0.4, 0.6, 0.2])
        data = Dataset([y])

        def kap(n):
            return math.exp(gammaln(n) - n * math.log1p(v))

        def m(idx):
            return math.exp(ng_log_marginal(y[list(idx)], m0, k0, a0, b0))

        joint = np.array([
            mass ** 2 * kap(2) * kap(1) * m((0, 2)) * m((1,)),
            mass ** 2 * kap(1) * kap(2) * m((0,)) * m((1, 2)),
            mass ** 3 * kap(1) ** 3 * m((0,)) * m((1,)) * m((2,)),
        ])
        probs = joint / joint.sum()

        state = make_state_d1([0, 1, 0], v, shape, kernel, data)
        table = KappaTable(spec, state.v)
        rng = np.random.default_rng(11)
        n_iter = 20000
        hits = np.zeros(3)
        for t in range(n_iter):
            update_allocation_conjugate(state, data, spec, kernel, 0, 2,
                                        table, rng)
            c = state.allocations[0]
            if c[2] == c[0]:
                hits[0] += 1
            elif c[2] == c[1]:
                hits[1] += 1
            else:
                hits[2] += 1
            if t % 1000 == 0:
                state.check()
        freq = hits / n_iter
        se = np.sqrt(probs * (1.0 - probs) / n_iter)
        assert np.all(np.abs(freq - probs) < 5.0 * se)

    def test_nonconjugate_update_frequencies_flat_kernel(self):
        # with a flat kernel the auxiliary-atom scheme must reproduce the
        # classic urn probabilities exactly, including the 1/n_aux split
        shape, mass, v = 1.0, 2.0, 1.3
        kernel = FlatKernel()
        spec = gamma_spec(1, shape, mass=mass)
        y = np.zeros(4)
        data = Dataset([y])
        probs = np.array([2.0, 1.0, mass])
        probs /= probs.sum()

        labels = np.array([0, 0, 1, 0])
        counts = np.array([[3], [1]])
        state = MarginalState([labels], counts, np.array([v]), shape,
                              atoms=[0.1, 0.2])
        rng = np.random.default_rng(5)
        table = KappaTable(spec, state.v)
        n_iter = 12000
        hits = np.zeros(3)
        for t in range(n_iter):
            update_allocation_nonconjugate(state, data, spec, kernel, 0, 3,
                                           table, rng, n_aux=3)
            c = state.allocations[0]
            if c[3] == c[0]:
                hits[0] += 1
            elif c[3] == c[2]:
                hits[1] += 1
            else:
                hits[2] += 1
            if t % 1000 == 0:
                state.check()
                assert len(state.atoms) == state.n_clusters
        freq = hits / n_iter
        se = np.sqrt(probs * (1.0 - probs) / n_iter)
        assert np.all(np.abs(freq - probs) < 5.0 * se)


class TestAuxiliaryUpdate:

    def test_log_target_matches_closed_form(self):
        # one-group gamma marginal: the v target collapses to
        # (n-1) log v - (M+n) log(1+v) plus a v-free constant
        shape, mass = 2.2, 1.7
        spec = gamma_spec(1, shape, mass=mass)
        kernel = FlatKernel()
        data = Dataset([np.zeros(5)])
        state = make_state_d1([0, 0, 1, 1, 1], 1.0, shape, kernel, data)
        n_sizes = state.group_sizes().astype(float)
        shift = None
        for v in (0.3, 1.0, 5.0):
            state.v = np.array([v])
            table = KappaTable(spec, state.v)
            got = ms._log_target_v(state, spec, table, n_sizes)
            closed = 4.0 * math.log(v) - (mass + 5.0) * math.log1p(v)
            if shift is None:
                shift = got - closed
            assert got - closed == pytest.approx(shift, abs=1e-10)

    def test_v_chain_matches_beta_transform(self):
        # at a fixed partition, v/(1+v) is Beta(n, M); run the
        # random-walk update alone and test the transformed samples
        shape, mass = 1.0, 1.7
        spec = gamma_spec(1, shape, mass=mass)
        kernel = FlatKernel()
        data = Dataset([np.zeros(5)])
        state = make_state_d1([0, 0, 1, 1, 1], 1.0, shape, kernel, data)
        table = KappaTable(spec, state.v)
        step = AdaptiveStepSize()
        rng = np.random.default_rng(7)
        for _ in range(500):
            table = update_v_marginal(state, spec, 0, step, rng, table)
        step.frozen = True
        draws = []
        for t in range(12000):
            table = update_v_marginal(state, spec, 0, step, rng, table)
            if t % 4 == 0:
                draws.append(state.v[0])
        w = np.asarray(draws) / (1.0 + np.asarray(draws))
        result = stats.kstest(w, stats.beta(5.0, mass).cdf)
        assert result.pvalue > 1e-3

    def test_v_update_keeps_state_consistent(self):
        spec = gamma_spec(2, 1.5)
        kernel = FlatKernel()
        data = Dataset([np.zeros(3), np.zeros(2)])
        rng = np.random.default_rng(3)
        state = initial_state(data, spec, kernel, rng, n_start=2)
        table = KappaTable(spec, state.v)
        steps = [AdaptiveStepSize(), AdaptiveStepSize()]
        for _ in range(200):
            for j in range(2):
                table = update_v_marginal(state, spec, j, steps[j], rng,
                                          table)
        assert np.all(state.v > 0.0)
        assert np.array_equal(table.v, state.v)
        assert steps[0].proposed == 200


class TestShapeUpdate:

    def test_shape_chain_recovers_prior(self):
        # gamma marginal with a flat kernel: the shape drops out of the
        # target entirely, so the chain must sample the prior, Jacobian
        # included
        mass = 1.2
        spec = gamma_spec(1, 1.0, mass=mass)
        kernel = FlatKernel()
        data = Dataset([np.zeros(3)])
        state = make_state_d1([0, 0, 1], 0.8, 1.0, kernel, data)
        table = KappaTable(spec, state.v)

        def log_prior(phi):
            return math.log(phi) - phi - gammaln(2.0)

        step = AdaptiveStepSize()
        rng = np.random.default_rng(19)
        for _ in range(1000):
            spec, table = update_shape_marginal(state, spec, log_prior,
                                                step, rng, table)
        step.frozen = True
        draws = []
        for t in range(16000):
            spec, table = update_shape_marginal(state, spec, log_prior,
                                                step, rng, table)
            if t % 4 == 0:
                draws.append(state.shape)
        result = stats.kstest(np.asarray(draws), stats.gamma(2.0).cdf)
        assert result.pvalue > 1e-3

    def test_shape_move_keeps_spec_in_sync(self):
        spec = gamma_spec(1, 1.5)
        kernel = FlatKernel()
        data = Dataset([np.zeros(4)])
        state = make_state_d1([0, 1, 0, 1], 1.0, 1.5, kernel, data)
        table = KappaTable(spec, state.v)
        step = AdaptiveStepSize()
        rng = np.random.default_rng(2)

        def log_prior(phi):
            return -phi

        for _ in range(50):
            spec, table = update_shape_marginal(state, spec, log_prior,
                                                step, rng, table)
            assert spec.shape == state.shape
            assert table.spec is spec
        assert step.proposed == 50


class TestAdaptiveStepSize:

    def test_records_tally_acceptance(self):
        s = AdaptiveStepSize()
        s.record(1.0)
        s.record(0.5)
        s.record(0.0)
        assert s.proposed == 3
        assert s.acceptance_rate == pytest.approx(0.5)

    def test_adapts_toward_target(self):
        up = AdaptiveStepSize()
        before = up.log_step
        up.record(1.0)
        assert up.log_step > before
        down = AdaptiveStepSize()
        before = down.log_step
        down.record(0.0)
        assert down.log_step < before

    def test_frozen_keeps_scale_fixed(self):
        s = AdaptiveStepSize(frozen=True)
        before = s.log_step
        for _ in range(10):
            s.record(1.0)
        assert s.log_step == before
        assert s.proposed == 10

    def test_log_step_is_clamped(self):
        s = AdaptiveStepSize(log_step=5.99)
        s.record(1.0)
        assert s.log_step <= 6.0
        s = AdaptiveStepSize(log_step=-11.99)
        s.record(0.0)
        assert s.log_step >= -12.0


class TestStateAndSweep:

    def test_initial_state_round_robin(self):
        kernel = UnivariateNormalGamma(0.0, 0.5, 2.0, 1.0)
        data = Dataset([np.arange(5.0), np.arange(4.0)])
        spec = gamma_spec(2, 1.0)
        rng = np.random.default_rng(0)
        state = initial_state(data, spec, kernel, rng, n_start=3)
        state.check()
        assert state.n_clusters == 3
        assert state.counts.sum() == 9
        assert np.array_equal(state.counts[:, 0], [2, 2, 1])
        assert np.array_equal(state.counts[:, 1], [2, 1, 1])
        # stats tally the right members
        n_in_stats = sum(s[0] for s in state.stats)
        assert n_in_stats == 9

    def test_initial_state_nonconjugate(self):
        kernel = MultivariateNormalNIW(np.zeros(2), 0.01, 12.0, np.eye(2))
        data = Dataset([np.random.default_rng(1).normal(size=(6, 2))])
        spec = gamma_spec(1, 1.0)
        rng = np.random.default_rng(4)
        state = initial_state(data, spec, kernel, rng, n_start=2)
        state.check()
        assert state.stats is None
        assert len(state.atoms) == 2

    def test_sweep_invariants_conjugate(self):
        rng = np.random.default_rng(42)
        y0 = np.concatenate([rng.normal(-2.0, 0.4, 12),
                             rng.normal(2.0, 0.4, 13)])
        y1 = rng.normal(2.0, 0.4, 15)
        data = Dataset([y0, y1])
        kernel = UnivariateNormalGamma.from_data(np.concatenate([y0, y1]))
        spec = gamma_spec(2, 1.0)
        state = initial_state(data, spec, kernel, rng)
        v_steps = [AdaptiveStepSize(), AdaptiveStepSize()]
        shape_step = AdaptiveStepSize()

        def log_prior(phi):
            return -phi

        table = None
        for t in range(60):
            spec, table = marginal_sweep(state, data, spec, kernel, rng,
                                         v_steps, shape_step=shape_step,
                                         log_prior=log_prior, table=table)
            if t % 10 == 0:
                state.check()
        state.check()
        assert spec.shape == state.shape
        assert 1 <= state.n_clusters <= 40
        # stats must still tally the allocations exactly
        rebuilt = []
        for k in range(state.n_clusters):
            s = kernel.stats_empty()
            for j in range(2):
                for i, lab in enumerate(state.allocations[j]):
                    if lab == k:
                        s = kernel.stats_add(s, data.groups[j][i, 0])
            rebuilt.append(s)
        for got, want in zip(state.stats, rebuilt):
            assert got[0] == want[0]
            assert got[1] == pytest.approx(want[1], rel=1e-9, abs=1e-9)
            assert got[2] == pytest.approx(want[2], rel=1e-9, abs=1e-9)

    def test_sweep_invariants_nonconjugate(self):
        rng = np.random.default_rng(8)
        g0 = np.vstack([rng.normal(-1.5, 0.5, size=(8, 2)),
                        rng.normal(1.5, 0.5, size=(8, 2))])
        g1 = rng.normal(1.5, 0.5, size=(10, 2))
        data = Dataset([g0, g1])
        kernel = MultivariateNormalNIW.from_data(np.vstack([g0, g1]))
        spec = gamma_spec(2, 1.0)
        state = initial_state(data, spec, kernel, rng)
        v_steps = [AdaptiveStepSize(), AdaptiveStepSize()]
        table = None
        for t in range(30):
            spec, table = marginal_sweep(state, data, spec, kernel, rng,
                                         v_steps, table=table)
            if t % 10 == 0:
                state.check()
                assert len(state.atoms) == state.n_clusters
        state.check()

    def test_update_atoms_redraws_every_cluster(self):
        kernel = MultivariateNormalNIW(np.zeros(1), 0.01, 11.0, np.eye(1))
        rng = np.random.default_rng(13)
        data = Dataset([rng.normal(size=(6, 1))])
        spec = gamma_spec(1, 1.0)
        state = initial_state(data, spec, kernel, rng, n_start=3)
        old = [a for a in state.atoms]
        update_atoms(state, data, kernel, rng)
        assert len(state.atoms) == 3
        assert all(new is not prev for new, prev in zip(state.atoms, old))
