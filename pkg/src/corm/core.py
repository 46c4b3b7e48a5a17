'''
Measure-level machinery for compound random measures.

A compound random measure (CoRM) is built from a directing Levy intensity
nu* on jump scales z and i.i.d. gamma scores: dimension j of the vector
measure puts mass m_{j,i} * J_i on atom i, with the J_i driven by nu* and
the scores Ga(shape).  Everything downstream (prior simulation, posterior
samplers) consumes the objects defined here: the directing intensity paired
with a requested marginal family, Laplace exponents, the multivariate
intensity rho_d, Levy copulas, mixed moments, and the tau/kappa integrals
of the marginal sampler.
'''

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, exp1, gammainc, gammaincc, gammaln, hyp2f1

from .numerics import (
    IntegralResult,
    QuadratureSpec,
    bessel_k,
    integrate,
    kummer_u,
    whittaker_w,
)

__all__ = [
    'ScoreDistribution',
    'MarginalFamily',
    'LevyIntensity',
    'CoRMSpec',
    'MomentPartition',
    'mgf_score',
    'directing_from_marginal',
    'marginal_from_directing',
    'marginal_intensity',
    'laplace_exponent',
    'laplace_exponent_exponential_closed',
    'marginal_exponent',
    'upsilon',
    'rho_density',
    'tau',
    'kappa',
    'g_rho',
    'levy_copula',
    'clayton_copula',
    'enumerate_moment_partitions',
    'mixed_moment',
    'covariance_normalized',
]


@dataclass(frozen=True)
class ScoreDistribution:
    '''Gamma score law Ga(shape, 1); scores rescale the shared jumps.'''
    shape: float

    def __post_init__(self):
        if not self.shape > 0.0:
            raise ValueError('score shape must be positive')

    def log_density(self, m):
        m = np.asarray(m, dtype=float)
        return (self.shape - 1.0) * np.log(m) - m - gammaln(self.shape)

    def density(self, m):
        return np.exp(self.log_density(m))


@dataclass(frozen=True)
class MarginalFamily:
    '''Marginal process family of each coordinate: gamma, sigma-stable
    with index sigma, or generalized gamma with index sigma and rate a.'''
    kind: str
    sigma: float = None
    a: float = None

    _KINDS = ('gamma', 'sigma-stable', 'generalized-gamma')

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError('unknown marginal family %r' % (self.kind,))
        if self.kind != 'gamma':
            if self.sigma is None or not 0.0 < self.sigma < 1.0:
                raise ValueError('sigma must lie in (0, 1)')
        if self.kind == 'generalized-gamma':
            if self.a is None or not self.a > 0.0:
                raise ValueError('rate a must be positive')

    @classmethod
    def gamma(cls):
        return cls('gamma')

    @classmethod
    def sigma_stable(cls, sigma):
        return cls('sigma-stable', sigma=float(sigma))

    @classmethod
    def generalized_gamma(cls, sigma, a):
        return cls('generalized-gamma', sigma=float(sigma), a=float(a))


class LevyIntensity:
    '''
    A Levy intensity: a density on an interval with infinite total mass
    but finite integral of min(1, s).

    density                 : vectorised callable
    support                 : (lower, upper); upper may be numpy.inf
    singularity_exponents   : endpoint power behaviour (p_lower, p_upper),
                              None where regular; used to build quadrature
                              hints.  p_lower <= -1 encodes the infinite
                              activity at the lower endpoint.
    tail_fn / inverse_fn    : optional closed forms for the tail integral
                              U(x) = int_x^upper density and its inverse;
                              quadrature / bisection otherwise.
    '''

    def __init__(self, density, support, singularity_exponents=(None, None),
                 tail_fn=None, inverse_fn=None):
        lo, hi = support
        if math.isinf(lo) or not hi > lo:
            raise ValueError('support must be a nonempty interval with finite lower end')
        self.density = density
        self.support = (float(lo), float(hi))
        self.singularity_exponents = tuple(singularity_exponents)
        self._tail_fn = tail_fn
        self._inverse_fn = inverse_fn

    def __call__(self, s):
        return self.density(s)

    def tail_integral(self, x):
        '''U(x) = integral of the density over (x, upper).'''
        lo, hi = self.support
        x = float(x)
        if x <= lo:
            return math.inf
        if x >= hi:
            return 0.0
        if self._tail_fn is not None:
            return float(self._tail_fn(x))
        p_hi = self.singularity_exponents[1]
        mid = lo + 1.0 if math.isinf(hi) else lo + 0.5 * (hi - lo)
        total = 0.0
        if x < mid:
            # the lower stretch can span many decades; integrate it in
            # log space where the density is tame
            if x > 0.0 and mid > 100.0 * x:
                def in_log(t):
                    z = np.exp(np.asarray(t, dtype=float))
                    return self.density(z) * z

                spec = QuadratureSpec(math.log(x), math.log(mid),
                                      relative_tolerance=1e-10)
                total += integrate(in_log, spec).value
            else:
                spec = QuadratureSpec(x, mid, relative_tolerance=1e-10)
                total += integrate(self.density, spec).value
            x = mid
        spec = QuadratureSpec(x, hi, relative_tolerance=1e-10,
                              singularity_hints=(None, p_hi))
        return total + integrate(self.density, spec).value

    def inverse_tail(self, level):
        '''Solve U(x) = level for x; U is strictly decreasing.'''
        level = float(level)
        if not level > 0.0:
            raise ValueError('tail level must be positive')
        if self._inverse_fn is not None:
            return float(self._inverse_fn(level))
        lo, hi = self.support
        # bracket the root, expanding geometrically toward the endpoints
        x = 1.0 if math.isinf(hi) else 0.5 * (lo + hi)
        a = b = x
        for _ in range(200):
            if self.tail_integral(a) >= level:
                break
            a = lo + 0.01 * (a - lo)
            if a <= lo:
                raise RuntimeError('inverse tail level is below '
                                   'floating-point resolution')
        else:
            raise RuntimeError('failed to bracket inverse tail from below')
        for _ in range(200):
            if self.tail_integral(b) <= level:
                break
            b = b * 2.0 if math.isinf(hi) else hi - 0.5 * (hi - b)
        else:
            raise RuntimeError('failed to bracket inverse tail from above')
        for _ in range(200):
            if lo == 0.0 and a > 0.0 and b / a > 4.0:
                mid = math.exp(0.5 * (math.log(a) + math.log(b)))
            else:
                mid = 0.5 * (a + b)
            if self.tail_integral(mid) >= level:
                a = mid
            else:
                b = mid
            if b - a <= 1e-12 * b:
                break
        return 0.5 * (a + b)


def _newton_tail_inverse(tail, density, start, upper):
    '''Vectorized solver for tail(z) = y on (0, upper): Newton steps
    (the tail derivative is -density) kept inside a maintained bracket,
    with geometric bisection when a step escapes it.  Levels beyond
    floating-point resolution clamp to the representable boundary.'''
    hi_clamp = upper * (1.0 - 1e-16)

    def inverse(y):
        y = np.asarray(y, dtype=float)
        yc = np.maximum(y, 1e-300)
        z = np.clip(start(yc), 1e-300, hi_clamp)
        lo = np.zeros_like(z)
        hi = np.full_like(z, upper)
        for _ in range(120):
            f = tail(z) - yc
            slope = np.maximum(density(z), 1e-300)
            # freeze elements whose residual is small in level or whose
            # Newton correction falls below the spacing of doubles at z,
            # or whose bracket has collapsed; iterating them further only
            # bounces them around the representable boundary
            done = (np.abs(f) <= 1e-11 * yc) \
                | (np.abs(f) <= 1e-13 * slope * z) \
                | (hi - lo <= 1e-13 * hi) \
                | ((z <= 1e-300) & (f < 0.0)) \
                | ((z >= hi_clamp) & (f > 0.0))
            if np.all(done):
                break
            above = f > 0.0
            lo = np.where(~done & above, np.maximum(lo, z), lo)
            hi = np.where(~done & ~above, np.minimum(hi, z), hi)
            stepped = z + f / slope
            bad = ~np.isfinite(stepped) | (stepped <= lo) | (stepped >= hi)
            wide = (lo <= 0.0) | (hi > 4.0 * lo)
            mid = np.where(wide, np.sqrt(np.maximum(lo, 1e-300) * hi),
                           0.5 * (lo + hi))
            # moves are capped to a bounded factor per iteration so a bad
            # start cannot fling the iterate hundreds of decades away
            move = np.clip(np.where(bad, mid, stepped),
                           z / 16.0, z * 16.0)
            z = np.where(done, z, np.clip(move, 1e-300, hi_clamp))
        return z

    return inverse


def mgf_score(z, lam, shape):
    '''Moment generating function of a Ga(shape) score at -lam * z,
    i.e. (1 + z lam)^(-shape).'''
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0.0):
        raise ValueError('lam must be nonnegative')
    return np.exp(-shape * np.log1p(np.asarray(z, dtype=float) * lam))


def _stable_coefficient(shape, sigma):
    # normalised so the induced marginal exponent is exactly lambda^sigma
    return math.exp(math.log(sigma) + gammaln(shape)
                    - gammaln(shape + sigma) - gammaln(1.0 - sigma))


def directing_from_marginal(marginal, shape):
    '''Directing intensity nu* whose compound with Ga(shape) scores has
    the requested marginal process in every coordinate.'''
    if not shape > 0.0:
        raise ValueError('score shape must be positive')
    if marginal.kind == 'gamma':
        def density(z):
            z = np.asarray(z, dtype=float)
            w = np.maximum(1.0 - z, 0.0)
            return w ** (shape - 1.0) / z

        offset = float(digamma(shape)) + np.euler_gamma
        # T(z) = -ln z - offset - sum_k (-1)^k C(shape-1, k) z^k / k near
        # zero; the hypergeometric form is kept away from its unstable
        # argument region near 1
        n_terms = 60
        signed_binom = np.empty(n_terms + 1)
        signed_binom[0] = 1.0
        for k in range(1, n_terms + 1):
            signed_binom[k] = signed_binom[k - 1] * (k - shape) / k
        series_coefs = signed_binom[1:] / np.arange(1.0, n_terms + 1.0)
        z_switch = min(0.3, 8.0 / shape) if shape > 1.0 else 0.3

        term_orders = np.arange(1.0, n_terms + 1.0)

        def tail(z):
            z = np.asarray(z, dtype=float)
            safe = np.atleast_1d(np.minimum(np.maximum(z, 1e-300), 1.0))
            low = safe <= z_switch
            out = np.empty_like(safe)
            if low.any():
                zl = safe[low]
                out[low] = -np.log(zl) - offset \
                    - (zl[:, None] ** term_orders) @ series_coefs
            if not low.all():
                w = 1.0 - safe[~low]
                out[~low] = w ** shape / shape \
                    * hyp2f1(1.0, shape, shape + 1.0, w)
            return out.reshape(z.shape)

        if shape == 1.0:
            inverse = lambda y: np.exp(-np.asarray(y, dtype=float))
        else:
            t_switch = float(tail(z_switch))

            def start(y):
                y = np.asarray(y, dtype=float)
                z_small = np.exp(-np.minimum(y + offset, 745.0))
                z_large = 1.0 - np.minimum(
                    (shape * y) ** (1.0 / shape), 1.0 - 1e-16)
                return np.where(y >= t_switch, z_small, z_large)

            inverse = _newton_tail_inverse(tail, density, start, 1.0)
        return LevyIntensity(density, (0.0, 1.0),
                             singularity_exponents=(-1.0, shape - 1.0),
                             tail_fn=tail, inverse_fn=inverse)
    if marginal.kind == 'sigma-stable':
        sigma = marginal.sigma
        c = _stable_coefficient(shape, sigma)

        def density(z):
            return c * np.asarray(z, dtype=float) ** (-1.0 - sigma)

        return LevyIntensity(
            density, (0.0, np.inf),
            singularity_exponents=(-1.0 - sigma, -1.0 - sigma),
            tail_fn=lambda x: c / sigma * x ** -sigma,
            inverse_fn=lambda y: (sigma * y / c) ** (-1.0 / sigma))
    if marginal.kind == 'generalized-gamma':
        sigma, a = marginal.sigma, marginal.a
        c = _stable_coefficient(shape, sigma)
        beta = sigma + shape

        def density(z):
            z = np.asarray(z, dtype=float)
            w = np.maximum(1.0 - a * z, 0.0)
            return c * z ** (-1.0 - sigma) * w ** (beta - 1.0)

        # unit-variable tail G(x) = int_x^1 t^(-1-sigma) (1-t)^(beta-1) dt
        # as an anchored binomial series near zero and the incomplete-beta
        # hypergeometric away from it; T(z) = c a^sigma G(a z)
        n_terms = 60
        signed_binom = np.empty(n_terms + 1)
        signed_binom[0] = 1.0
        for k in range(1, n_terms + 1):
            signed_binom[k] = signed_binom[k - 1] * (k - beta) / k
        exponents = np.arange(0.0, n_terms + 1.0) - sigma
        series_coefs = signed_binom / exponents
        x_switch = min(0.3, 8.0 / beta) if beta > 1.0 else 0.3
        anchor_sum = float(series_coefs @ x_switch ** exponents)
        q = QuadratureSpec(x_switch, 1.0, relative_tolerance=1e-12,
                           singularity_hints=(None, beta - 1.0))
        anchor = integrate(
            lambda t: t ** (-1.0 - sigma) * (1.0 - t) ** (beta - 1.0),
            q).value
        scale = c * a ** sigma

        def tail(z):
            z = np.asarray(z, dtype=float)
            x = np.atleast_1d(np.clip(a * z, 1e-300, 1.0))
            low = x <= x_switch
            out = np.empty_like(x)
            if low.any():
                xl = x[low]
                out[low] = anchor + anchor_sum \
                    - (xl[:, None] ** exponents) @ series_coefs
            if not low.all():
                w = 1.0 - x[~low]
                out[~low] = w ** beta / beta \
                    * hyp2f1(beta, 1.0 + sigma, beta + 1.0, w)
            return scale * out.reshape(z.shape)

        g_switch = scale * anchor
        # T(x)/scale -> x^-sigma / sigma + low_const as x -> 0
        low_const = anchor + anchor_sum

        def start(y):
            yu = np.asarray(y, dtype=float) / scale
            lead = np.maximum(yu - low_const, 0.01 * yu)
            x_small = (sigma * lead) ** (-1.0 / sigma)
            x_large = 1.0 - np.minimum((beta * yu) ** (1.0 / beta),
                                       1.0 - 1e-16)
            x = np.where(np.asarray(y, dtype=float) >= g_switch,
                         x_small, x_large)
            return x / a

        inverse = _newton_tail_inverse(tail, density, start, 1.0 / a)
        return LevyIntensity(
            density, (0.0, 1.0 / a),
            singularity_exponents=(-1.0 - sigma, beta - 1.0),
            tail_fn=tail, inverse_fn=inverse)
    raise ValueError('unknown marginal family %r' % (marginal.kind,))


def marginal_intensity(marginal):
    '''Closed-form Levy intensity of the marginal process itself.'''
    if marginal.kind == 'gamma':
        def density(s):
            s = np.asarray(s, dtype=float)
            return np.exp(-s) / s

        return LevyIntensity(density, (0.0, np.inf),
                             singularity_exponents=(-1.0, None),
                             tail_fn=lambda x: exp1(x))
    if marginal.kind == 'sigma-stable':
        sigma = marginal.sigma
        c = sigma / math.gamma(1.0 - sigma)

        def density(s):
            return c * np.asarray(s, dtype=float) ** (-1.0 - sigma)

        return LevyIntensity(
            density, (0.0, np.inf),
            singularity_exponents=(-1.0 - sigma, -1.0 - sigma),
            tail_fn=lambda x: x ** -sigma / math.gamma(1.0 - sigma),
            inverse_fn=lambda y: (math.gamma(1.0 - sigma) * y) ** (-1.0 / sigma))
    if marginal.kind == 'generalized-gamma':
        sigma, a = marginal.sigma, marginal.a
        c = sigma / math.gamma(1.0 - sigma)

        def density(s):
            s = np.asarray(s, dtype=float)
            return c * s ** (-1.0 - sigma) * np.exp(-a * s)

        return LevyIntensity(density, (0.0, np.inf),
                             singularity_exponents=(-1.0 - sigma, None))
    raise ValueError('unknown marginal family %r' % (marginal.kind,))


def marginal_from_directing(directing, shape, theta=None, sigma=None, a=None):
    '''
    Marginal Levy intensity induced by a named directing family under
    Ga(shape) scores.

    directing: 'beta' (parameter theta; nu*(z) = z^-1 (1-z)^(theta-1)),
    'gamma' (z^-1 e^-z), 'sigma-stable' (sigma/Gamma(1-sigma) z^(-1-sigma))
    or 'generalized-gamma' (the same with an e^(-a z) factor).
    '''
    if not shape > 0.0:
        raise ValueError('score shape must be positive')
    if directing == 'beta':
        if theta is None or not theta > 0.0:
            raise ValueError('beta directing needs theta > 0')
        lc = gammaln(theta) - gammaln(shape)

        def density(s):
            s = np.asarray(s, dtype=float)
            u = np.array([kummer_u(theta, shape + 1.0, float(x))
                          for x in np.atleast_1d(s)])
            u = u.reshape(s.shape) if s.shape else float(u[0])
            return np.exp(lc + (shape - 1.0) * np.log(s) - s) * u

        return LevyIntensity(density, (0.0, np.inf),
                             singularity_exponents=(-1.0, None))
    if directing == 'gamma':
        def density(s):
            s = np.asarray(s, dtype=float)
            k = np.array([bessel_k(shape, 2.0 * math.sqrt(float(x)))
                          for x in np.atleast_1d(s)])
            k = k.reshape(s.shape) if s.shape else float(k[0])
            return 2.0 / math.gamma(shape) * s ** (0.5 * shape - 1.0) * k

        return LevyIntensity(density, (0.0, np.inf),
                             singularity_exponents=(-1.0, None))
    if directing == 'sigma-stable':
        if sigma is None or not 0.0 < sigma < 1.0:
            raise ValueError('sigma must lie in (0, 1)')
        c = math.exp(math.log(sigma) + gammaln(shape + sigma)
                     - gammaln(shape) - gammaln(1.0 - sigma))

        def density(s):
            return c * np.asarray(s, dtype=float) ** (-1.0 - sigma)

        return LevyIntensity(
            density, (0.0, np.inf),
            singularity_exponents=(-1.0 - sigma, -1.0 - sigma),
            tail_fn=lambda x: c / sigma * x ** -sigma,
            inverse_fn=lambda y: (sigma * y / c) ** (-1.0 / sigma))
    if directing == 'generalized-gamma':
        if sigma is None or not 0.0 < sigma < 1.0:
            raise ValueError('sigma must lie in (0, 1)')
        if a is None or not a > 0.0:
            raise ValueError('rate a must be positive')
        lc = (math.log(2.0 * sigma) - gammaln(1.0 - sigma) - gammaln(shape)
              + 0.5 * (sigma + shape) * math.log(a))

        def density(s):
            s = np.asarray(s, dtype=float)
            k = np.array([bessel_k(sigma + shape, 2.0 * math.sqrt(a * float(x)))
                          for x in np.atleast_1d(s)])
            k = k.reshape(s.shape) if s.shape else float(k[0])
            return np.exp(lc + (0.5 * (shape - sigma) - 1.0) * np.log(s)) * k

        return LevyIntensity(density, (0.0, np.inf),
                             singularity_exponents=(-1.0 - sigma, None))
    raise ValueError('unsupported directing family %r' % (directing,))


def _mixture_marginal_density(directing, shape, s):
    '''Marginal intensity by direct mixing: int z^-1 f(s/z) nu*(z) dz.'''
    lo, hi = directing.support
    p_lo, p_hi = directing.singularity_exponents
    s = float(s)

    def integrand(z):
        z = np.asarray(z, dtype=float)
        log_f = ((shape - 1.0) * (np.log(s) - np.log(z)) - s / z
                 - gammaln(shape))
        return np.exp(log_f - np.log(z)) * directing.density(z)

    if math.isinf(hi):
        # e^(-s/z) -> 1 at large z, leaving z^(-shape - 1 + p_hi + ...)
        tail = p_hi - shape if p_hi is not None else None
    else:
        tail = p_hi if (p_hi is not None and p_hi != 0.0) else None
    return _integrate_with_breaks(integrand, lo, hi, (None, tail), (s,), 1e-9)


@dataclass(frozen=True)
class CoRMSpec:
    '''
    Full specification of a compound random measure: dimension, score law,
    marginal family, the directing intensity, and the centring measure's
    total mass.  `base` optionally carries the centring base distribution
    (an object the mixture layer understands); the measure-level operations
    below never touch it.

    Build with from_marginal(), which derives the directing intensity and
    verifies the marginal consistency numerically.  with_shape() rebuilds
    for a new score shape without the (costly) re-verification, for use
    inside samplers.
    '''
    dimension: int
    score: ScoreDistribution
    marginal: MarginalFamily
    directing: LevyIntensity
    centring_mass: float = 1.0
    base: object = field(default=None, compare=False)

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError('dimension must be at least 1')
        if not self.centring_mass > 0.0:
            raise ValueError('centring mass must be positive')

    @classmethod
    def from_marginal(cls, dimension, shape, marginal, centring_mass=1.0,
                      base=None, verify=True):
        directing = directing_from_marginal(marginal, shape)
        spec = cls(dimension, ScoreDistribution(shape), marginal, directing,
                   centring_mass, base)
        if verify:
            target = marginal_intensity(marginal)
            for s in (0.3, 1.0, 3.0):
                got = _mixture_marginal_density(directing, shape, s)
                want = float(target.density(s))
                if abs(got - want) > 1e-4 * abs(want):
                    raise ValueError(
                        'directing intensity is inconsistent with the '
                        'requested marginal at s=%g (%g vs %g)'
                        % (s, got, want))
        return spec

    def with_shape(self, shape):
        return type(self).from_marginal(
            self.dimension, shape, self.marginal, self.centring_mass,
            self.base, verify=False)

    @property
    def shape(self):
        return self.score.shape


def _integrate_with_breaks(integrand, lo, hi, hints, breaks, rel_tol):
    '''Piecewise adaptive quadrature, splitting at interior scale
    transitions so endpoint hints describe their piece correctly.'''
    pts = np.unique([b for b in np.atleast_1d(breaks)
                     if lo < b < hi and np.isfinite(b)])
    if pts.size == 0:
        q = QuadratureSpec(lo, hi, relative_tolerance=rel_tol,
                           singularity_hints=hints)
        return integrate(integrand, q).value
    edges = [lo] + list(pts) + [hi]
    total = 0.0
    for i in range(len(edges) - 1):
        a, b = edges[i], edges[i + 1]
        h = (hints[0] if i == 0 else None,
             hints[1] if i == len(edges) - 2 else None)
        # pieces that start at a positive break: integrate in log space,
        # where power-law stretches and tails become smooth and compact
        if h[0] is None and a > 0.0 and (
                math.isinf(b) or (h[1] is None and b > 100.0 * a)):
            def logspaced(t, _f=integrand):
                t = np.asarray(t, dtype=float)
                out = np.zeros_like(t)
                ok = t < 700.0
                z = np.exp(t[ok])
                out[ok] = _f(z) * z
                return out

            q = QuadratureSpec(math.log(a),
                               b if math.isinf(b) else math.log(b),
                               relative_tolerance=rel_tol)
            total += integrate(logspaced, q).value
            continue
        q = QuadratureSpec(a, b, relative_tolerance=rel_tol,
                           singularity_hints=h)
        total += integrate(integrand, q).value
    return total


def _psi_quadrature(spec, lam, rel_tol=1e-10):
    lam = np.asarray(lam, dtype=float)
    shape = spec.shape
    nu = spec.directing
    lo, hi = nu.support
    p_lo, p_hi = nu.singularity_exponents
    active = lam[lam > 0.0]
    if active.size == 0:
        return 0.0

    def integrand(z):
        z = np.asarray(z, dtype=float)
        t = np.log1p(np.multiply.outer(active, z)).sum(axis=0)
        return -np.expm1(-shape * t) * nu.density(z)

    # the bracket vanishes linearly at 0, softening the endpoint by one power
    hint_lo = None
    if p_lo is not None and -1.0 < p_lo + 1.0 < 0.0:
        hint_lo = p_lo + 1.0
    if math.isinf(hi):
        hint_hi = p_hi
    else:
        hint_hi = p_hi if (p_hi is not None and p_hi != 0.0) else None
    return _integrate_with_breaks(integrand, lo, hi, (hint_lo, hint_hi),
                                  1.0 / active, rel_tol)


def laplace_exponent(spec, lam):
    '''psi(lam) = int (1 - prod_j (1 + lam_j z)^-shape) nu*(z) dz, the
    exponent in the joint Laplace functional of the measure vector.'''
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 1 or lam.size != spec.dimension:
        raise ValueError('lam must be a vector of length %d' % spec.dimension)
    if np.any(lam < 0.0):
        raise ValueError('lam must be nonnegative')
    return _psi_quadrature(spec, lam)


def upsilon(spec, lam_tilde):
    '''Laplace exponent evaluated on the distinct values lam_tilde (the
    reduction of psi to the l <= d distinct coordinates).'''
    lam = np.asarray(lam_tilde, dtype=float)
    if np.any(lam < 0.0):
        raise ValueError('lam_tilde must be nonnegative')
    if np.all(lam == 0.0):
        return 0.0
    if np.unique(lam).size != lam.size:
        raise ValueError('lam_tilde values must be distinct')
    return _psi_quadrature(spec, lam)


def laplace_exponent_exponential_closed(psi1, lam_tilde, counts):
    '''
    Closed form of the multivariate exponent for exponential scores
    (shape 1), from the univariate exponent psi1 by partial fractions:

        psi(lam) = prod_i [1/(n_i - 1)!] d^(n_i-1)/d lam_i^(n_i-1)
                   [ Upsilon_l(lam) prod_i lam_i^(n_i-1) ],
        Upsilon_l(lam) = sum_i a_i psi1(lam_i),
        a_i = lam_i^(l-1) / prod_{j != i} (lam_i - lam_j).

    psi1 must be built from arithmetic and sympy functions so it can be
    differentiated analytically (e.g. lambda x: sympy.log(1 + x)).
    '''
    import sympy as sp

    lam = [float(v) for v in lam_tilde]
    counts = [int(n) for n in counts]
    if len(lam) != len(counts) or any(n < 1 for n in counts):
        raise ValueError('counts must be positive and match lam_tilde')
    if all(v == 0.0 for v in lam):
        return 0.0
    if len(set(lam)) != len(lam):
        raise ValueError('lam_tilde values must be distinct; '
                         'merge repeats into counts')
    l = len(lam)
    xs = sp.symbols('x0:%d' % l, positive=True)
    ups = sp.Integer(0)
    for i in range(l):
        a_i = xs[i] ** (l - 1)
        for j in range(l):
            if j != i:
                a_i = a_i / (xs[i] - xs[j])
        ups = ups + a_i * psi1(xs[i])
    expr = ups
    for i in range(l):
        expr = expr * xs[i] ** (counts[i] - 1)
    for i in range(l):
        if counts[i] > 1:
            expr = sp.diff(expr, xs[i], counts[i] - 1) / math.factorial(counts[i] - 1)
    value = expr.subs({xs[i]: sp.Rational(str(lam[i])) for i in range(l)})
    return float(sp.N(value, 30))


def rho_density(spec, s, method='auto'):
    '''
    Multivariate Levy intensity rho_d at the positive vector s: the density
    of putting scaled scores s_j on the d coordinates of one shared jump.

    method='closed' uses the closed forms (gamma and sigma-stable marginals),
    'mixture' integrates int z^-d prod_j f(s_j / z) nu*(z) dz directly,
    'auto' picks closed when available.
    '''
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size != spec.dimension:
        raise ValueError('s must be a vector of length %d' % spec.dimension)
    if np.any(s <= 0.0):
        raise ValueError('all components of s must be positive')
    if method not in ('auto', 'closed', 'mixture'):
        raise ValueError('method must be auto, closed or mixture')
    kind = spec.marginal.kind
    if method == 'auto':
        method = 'mixture' if kind == 'generalized-gamma' else 'closed'
    if method == 'mixture':
        return _rho_by_mixture(spec, s)
    shape = spec.shape
    d = spec.dimension
    total = float(s.sum())
    log_pref = ((shape - 1.0) * np.log(s).sum()
                - (d - 1.0) * gammaln(shape))
    if kind == 'gamma':
        if shape == 1.0:
            acc = 0.0
            for j in range(d):
                acc += math.exp(
                    gammaln(d) - gammaln(d - j)
                    - (j + 1.0) * math.log(total) - total)
            return acc
        k = 0.5 * ((d - 2.0) * shape + 1.0)
        mu = 0.5 * d * shape
        w = whittaker_w(k, mu, total)
        return math.exp(log_pref - 0.5 * (d * shape + 1.0) * math.log(total)
                        - 0.5 * total) * w
    if kind == 'sigma-stable':
        sigma = spec.marginal.sigma
        return math.exp(
            log_pref + math.log(sigma) + gammaln(sigma + d * shape)
            - gammaln(shape + sigma) - gammaln(1.0 - sigma)
            - (sigma + d * shape) * math.log(total))
    raise ValueError('no closed multivariate intensity for %r' % (kind,))


def _rho_by_mixture(spec, s, rel_tol=1e-9):
    shape = spec.shape
    d = spec.dimension
    nu = spec.directing
    lo, hi = nu.support
    p_lo, p_hi = nu.singularity_exponents
    total = float(np.sum(s))
    log_s = float(np.log(s).sum())

    def integrand(z):
        z = np.asarray(z, dtype=float)
        log_f = ((shape - 1.0) * (log_s - d * np.log(z)) - total / z
                 - d * gammaln(shape))
        return np.exp(log_f - d * np.log(z)) * nu.density(z)

    if math.isinf(hi):
        tail = p_hi - d * shape if p_hi is not None else None
    else:
        tail = p_hi if (p_hi is not None and p_hi != 0.0) else None
    return _integrate_with_breaks(integrand, lo, hi, (None, tail),
                                  (total,), rel_tol)


def tau(a, z, v, shape):
    '''Integrated score factor Gamma(a + shape)/Gamma(shape) *
    (1 + v z)^(-a - shape) of one coordinate with a matched observations.'''
    if a < 0:
        raise ValueError('a must be nonnegative')
    lc = gammaln(a + shape) - gammaln(shape)
    z = np.asarray(z, dtype=float)
    return np.exp(lc - (a + shape) * np.log1p(v * z))


def _kappa_quadrature(spec, a, v, rel_tol=1e-9):
    '''log of int z^{sum a} prod_j (1 + v_j z)^{-a_j - shape} nu*(z) dz,
    without the Gamma(a_j + shape)/Gamma(shape) coefficients.'''
    shape = spec.shape
    nu = spec.directing
    lo, hi = nu.support
    p_lo, p_hi = nu.singularity_exponents
    total_a = float(np.sum(a))
    a_arr = np.asarray(a, dtype=float)
    v_arr = np.asarray(v, dtype=float)
    keep = v_arr > 0.0
    av, vv = a_arr[keep], v_arr[keep]

    def integrand(z):
        z = np.asarray(z, dtype=float)
        t = ((av + shape)[:, None] * np.log1p(np.multiply.outer(vv, z))).sum(axis=0)
        return np.exp(total_a * np.log(z) - t) * nu.density(z)

    hint_lo = None
    if p_lo is not None:
        eff = p_lo + total_a
        if eff <= -1.0:
            raise ValueError('integral diverges at the lower endpoint')
        if eff < 0.0 or eff != round(eff):
            # fractional exponents (z^0.5 and the like) also benefit from
            # the endpoint substitution: kinked derivatives slow bisection
            hint_lo = eff
    if math.isinf(hi):
        eff = total_a - float((av + shape).sum())
        eff = eff + p_hi if p_hi is not None else eff
        if eff >= -1.0:
            raise ValueError('integral diverges in the tail; '
                             'some v_j must be positive')
        hint_hi = eff
    else:
        hint_hi = p_hi if (p_hi is not None and p_hi != 0.0) else None
    breaks = 1.0 / vv if vv.size else ()
    return _integrate_with_breaks(integrand, lo, hi, (hint_lo, hint_hi),
                                  breaks, rel_tol)


def kappa(spec, a, v):
    '''kappa_a(v) = int z^{sum a} prod_j tau_{a_j}(z, v_j) nu*(z) dz, the
    marginal sampler's cluster weight integral.'''
    a = np.asarray(a)
    v = np.asarray(v, dtype=float)
    if a.shape != v.shape or a.ndim != 1:
        raise ValueError('a and v must be vectors of equal length')
    if np.any(a < 0) or np.any(v < 0.0):
        raise ValueError('a and v must be nonnegative')
    if a.sum() < 1:
        raise ValueError('sum of a must be at least 1; '
                         'the bare integral has infinite mass')
    lc = float(np.sum(gammaln(a + spec.shape) - gammaln(spec.shape)))
    return math.exp(lc) * _kappa_quadrature(spec, a, v)


def g_rho(spec, q, lam):
    '''Moment kernel g_rho(q; lam) = int prod_j s_j^{q_j} e^{-lam_j s_j}
    rho_d(s) ds, the mixed lam-derivative of the Laplace exponent.'''
    q = np.asarray(q)
    lam = np.asarray(lam, dtype=float)
    if q.shape != lam.shape or q.ndim != 1 or q.size != spec.dimension:
        raise ValueError('q and lam must be vectors of length %d'
                         % spec.dimension)
    if np.any(lam <= 0.0):
        raise ValueError('lam must be strictly positive')
    if np.any(q < 0) or q.sum() < 1:
        raise ValueError('q must be nonnegative with sum at least 1')
    lc = float(np.sum(gammaln(q + spec.shape) - gammaln(spec.shape)))
    return math.exp(lc) * _kappa_quadrature(spec, q, lam)


def levy_copula(spec, y1, y2):
    '''
    Levy copula of a two-dimensional CoRM evaluated at tail masses
    (y1, y2): C(y1, y2) = int nu*(z) prod_j (1 - F(U^-1(y_j) / z)) dz,
    where U is the marginal tail integral and F the Ga(shape) score cdf.
    '''
    if spec.dimension != 2:
        raise ValueError('the copula is defined for dimension 2')
    for y in (y1, y2):
        if not (y >= 0.0):
            raise ValueError('tail masses must be nonnegative')
    if y1 == 0.0 or y2 == 0.0:
        return 0.0
    marg = marginal_intensity(spec.marginal)
    xs = [0.0 if math.isinf(y) else marg.inverse_tail(y) for y in (y1, y2)]
    shape = spec.shape
    nu = spec.directing
    lo, hi = nu.support
    p_lo, p_hi = nu.singularity_exponents

    def integrand(z):
        z = np.asarray(z, dtype=float)
        out = nu.density(z)
        for x in xs:
            if x > 0.0:
                out = out * gammaincc(shape, x / z)
            # x == 0: survival factor is identically 1
        return out

    if math.isinf(hi):
        hint_hi = p_hi
    else:
        hint_hi = p_hi if (p_hi is not None and p_hi != 0.0) else None
    # the score survival factors vanish faster than any power at z -> 0
    return _integrate_with_breaks(integrand, lo, hi, (None, hint_hi),
                                  [x for x in xs if x > 0.0], 1e-8)


def clayton_copula(gamma_par, y1, y2):
    '''Clayton Levy copula (y1^-g + y2^-g)^(-1/g).'''
    if not gamma_par > 0.0:
        raise ValueError('gamma must be positive')
    if y1 == 0.0 or y2 == 0.0:
        return 0.0
    if math.isinf(y1):
        return float(y2)
    if math.isinf(y2):
        return float(y1)
    return float((y1 ** -gamma_par + y2 ** -gamma_par) ** (-1.0 / gamma_par))


@dataclass(frozen=True)
class MomentPartition:
    '''One term of the mixed-moment sum: distinct score-exponent vectors
    (the blocks) with their multiplicities.'''
    vectors: tuple
    multiplicities: tuple

    @property
    def block_count(self):
        return len(self.vectors)

    @property
    def k(self):
        return int(sum(self.multiplicities))


def _vector_key(vec):
    return (sum(vec),) + tuple(vec)


def enumerate_moment_partitions(q, k):
    '''
    All ways of writing the exponent vector q as sum_i eta_i * s_i with
    k = sum_i eta_i blocks: distinct nonzero integer vectors s_i (listed in
    increasing (|s|, s_1, ..., s_d) order) and positive multiplicities.
    '''
    q = tuple(int(x) for x in q)
    if any(x < 0 for x in q):
        raise ValueError('q must be nonnegative')
    if sum(q) > 6:
        raise ValueError('moment order above 6 is not supported')
    if k < 1 or k > sum(q):
        return []
    d = len(q)
    ranges = [range(x + 1) for x in q]
    candidates = sorted(
        (vec for vec in itertools.product(*ranges) if any(vec)),
        key=_vector_key)
    results = []

    def recurse(start, remaining, blocks_left, chosen):
        if blocks_left == 0:
            if all(r == 0 for r in remaining):
                vectors = tuple(v for v, _ in chosen)
                etas = tuple(e for _, e in chosen)
                results.append(MomentPartition(vectors, etas))
            return
        for idx in range(start, len(candidates)):
            vec = candidates[idx]
            if any(v > r for v, r in zip(vec, remaining)):
                continue
            max_eta = min(blocks_left,
                          min(r // v for v, r in zip(vec, remaining) if v))
            for eta in range(1, max_eta + 1):
                rem = tuple(r - eta * v for v, r in zip(vec, remaining))
                recurse(idx + 1, rem, blocks_left - eta,
                        chosen + [(vec, eta)])

    recurse(0, q, k, [])
    return results


def _directing_moment(spec, m, rel_tol=1e-10):
    '''int z^m nu*(z) dz for integer m >= 1.'''
    nu = spec.directing
    lo, hi = nu.support
    p_lo, p_hi = nu.singularity_exponents
    if math.isinf(hi):
        tail = (p_hi + m) if p_hi is not None else None
        if tail is None or tail >= -1.0:
            raise ValueError('directing moment of order %d diverges' % m)
    else:
        tail = p_hi if (p_hi is not None and p_hi != 0.0) else None
    hint_lo = None
    if p_lo is not None and -1.0 < p_lo + m < 0.0:
        hint_lo = p_lo + m

    def integrand(z):
        z = np.asarray(z, dtype=float)
        return z ** m * nu.density(z)

    q = QuadratureSpec(lo, hi, relative_tolerance=rel_tol,
                       singularity_hints=(hint_lo, tail))
    return integrate(integrand, q).value


def mixed_moment(spec, q, region_mass):
    '''
    E[prod_j mu_j(A)^{q_j}] for a region of centring mass region_mass,
    by the moment-partition expansion over shared jumps.
    '''
    q = np.asarray(q)
    if q.ndim != 1 or q.size != spec.dimension:
        raise ValueError('q must be a vector of length %d' % spec.dimension)
    if np.any(q < 0):
        raise ValueError('q must be nonnegative')
    if not region_mass > 0.0:
        raise ValueError('region mass must be positive')
    total_q = int(q.sum())
    if total_q == 0:
        return 1.0
    if total_q > 6:
        raise ValueError('moment order above 6 is not supported')
    if spec.marginal.kind == 'sigma-stable':
        raise ValueError('mixed moments diverge for sigma-stable marginals: '
                         'the directing intensity has no finite moments')
    shape = spec.shape
    moments = {m: _directing_moment(spec, m) for m in range(1, total_q + 1)}
    total = 0.0
    for k in range(1, total_q + 1):
        level = 0.0
        for part in enumerate_moment_partitions(q, k):
            term = 1.0
            for vec, eta in zip(part.vectors, part.multiplicities):
                log_c = float(sum(gammaln(shape + sl) - gammaln(shape)
                                  - gammaln(sl + 1.0) for sl in vec))
                block = math.exp(log_c) * moments[sum(vec)]
                term *= block ** eta / math.factorial(eta)
            level += term
        total += region_mass ** k * level
    log_qfact = float(sum(gammaln(x + 1.0) for x in q))
    return math.exp(log_qfact) * total


def marginal_exponent(marginal, lam):
    '''Closed univariate Laplace exponent of the marginal process.'''
    lam = np.asarray(lam, dtype=float)
    if marginal.kind == 'gamma':
        return np.log1p(lam)
    if marginal.kind == 'sigma-stable':
        return lam ** marginal.sigma
    if marginal.kind == 'generalized-gamma':
        s, a = marginal.sigma, marginal.a
        return (a + lam) ** s - a ** s
    raise ValueError('unknown marginal family %r' % (marginal.kind,))


def _tilted_second_moment(marginal, lam):
    '''m2(lam) = int s^2 e^{-lam s} nu(s) ds over the marginal intensity.'''
    lam = np.asarray(lam, dtype=float)
    if marginal.kind == 'gamma':
        return (1.0 + lam) ** -2.0
    if marginal.kind == 'sigma-stable':
        s = marginal.sigma
        return s * (1.0 - s) * lam ** (s - 2.0)
    if marginal.kind == 'generalized-gamma':
        s, a = marginal.sigma, marginal.a
        return s * (1.0 - s) * (a + lam) ** (s - 2.0)
    raise ValueError('unknown marginal family %r' % (marginal.kind,))


def covariance_normalized(spec, mass_a, mass_b, mass_ab, total_mass,
                          rel_tol=1e-6):
    '''
    Correlation of the two normalised coordinate measures over regions A
    and B with centring masses mass_a, mass_b, intersection mass_ab, and
    total space mass total_mass.
    '''
    if spec.dimension != 2:
        raise ValueError('defined for dimension 2')
    if not (0.0 <= mass_ab <= min(mass_a, mass_b)
            and max(mass_a, mass_b) <= total_mass and total_mass > 0.0):
        raise ValueError('inconsistent region masses')
    bracket = mass_ab - mass_a * mass_b / total_mass
    if bracket == 0.0:
        return 0.0
    shape = spec.shape
    ones = np.array([1, 1])
    kernel_tol = min(1e-7, rel_tol * 1e-1)
    coeff = math.exp(2.0 * (gammaln(1.0 + shape) - gammaln(shape)))

    # the integrand is symmetric in (l1, l2), so integrate over the
    # wedge l2 < l1 and double
    def outer(l1_values):
        out = np.empty_like(np.asarray(l1_values, dtype=float))
        for i, l1 in enumerate(np.atleast_1d(l1_values)):
            # psi(l1, l2) >= psi1(l1), so once the tilt underflows the
            # whole inner integral is numerically zero
            if total_mass * marginal_exponent(spec.marginal, float(l1)) > 745.0:
                out[i] = 0.0
                continue

            def inner(l2_values):
                vals = np.empty_like(np.asarray(l2_values, dtype=float))
                for j, l2 in enumerate(np.atleast_1d(l2_values)):
                    lam = np.array([float(l1), float(l2)])
                    g = coeff * _kappa_quadrature(spec, ones, lam, kernel_tol)
                    vals[j] = g * math.exp(
                        -total_mass * _psi_quadrature(spec, lam, kernel_tol))
                return vals

            out[i] = _integrate_with_breaks(inner, 0.0, float(l1),
                                            (None, None), (1.0,), rel_tol)
        return out

    cross = 2.0 * _integrate_with_breaks(outer, 0.0, np.inf,
                                         (None, -1.0 - shape), (1.0,), rel_tol)

    def variance_integrand(lam):
        lam = np.asarray(lam, dtype=float)
        return (lam * _tilted_second_moment(spec.marginal, lam)
                * np.exp(-total_mass * marginal_exponent(spec.marginal, lam)))

    hint_lo = (spec.marginal.sigma - 1.0
               if spec.marginal.kind == 'sigma-stable' else None)
    qv = QuadratureSpec(0.0, np.inf, relative_tolerance=1e-10,
                        singularity_hints=(hint_lo, -1.0 - 0.9 * total_mass))
    var_kernel = integrate(variance_integrand, qv).value
    var_a = (mass_a - mass_a ** 2 / total_mass) * var_kernel
    var_b = (mass_b - mass_b ** 2 / total_mass) * var_kernel
    corr = bracket * cross / math.sqrt(var_a * var_b)
    return float(min(1.0, max(-1.0, corr)))
