'''Prior simulation of compound random measures.

Jumps of the directing measure are generated largest-first by inverting
its tail integral at unit-rate Poisson arrival times, then each
coordinate perturbs them with independent gamma scores.
'''

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from .numerics import QuadratureSpec, integrate

__all__ = [
    'CoRMRealization',
    'NormalizedWeights',
    'sample_corm',
    'normalize',
    'score_ratio_sample',
    'realization_to_csv',
]

DEFAULT_TAIL_MASS = 1e-6
STABLE_DEFAULT_JUMPS = 1000

_GRID_CACHE = {}
_TRUNC_CACHE = {}


@dataclass
class CoRMRealization:
    '''Truncated draw: shared jumps (decreasing), their locations, and a
    d x N matrix of per-coordinate scores.'''
    jumps: np.ndarray
    locations: np.ndarray
    scores: np.ndarray
    truncation_level: float

    @property
    def jump_count(self):
        return int(self.jumps.size)

    def total_masses(self):
        '''Unnormalised coordinate masses sum_i m_ji J_i, shape (d,).'''
        return self.scores @ self.jumps


@dataclass
class NormalizedWeights:
    '''Row-stochastic d x N matrix pi_ji = m_ji J_i / sum_l m_jl J_l.'''
    pi: np.ndarray


def _family_key(spec):
    m = spec.marginal
    return (m.kind, m.sigma, m.a, spec.shape)


def _weighted_mass(directing, x, weight_power=1):
    '''int_lo^x z^w nu*(z) dz with the endpoint hint shifted by w.'''
    lo, hi = directing.support
    p_lo = directing.singularity_exponents[0]
    hint = None
    if p_lo is not None:
        eff = p_lo + weight_power
        if eff <= -1.0:
            raise ValueError('residual mass diverges')
        if eff < 0.0 or eff != round(eff):
            hint = eff
    q = QuadratureSpec(lo, x, relative_tolerance=1e-9,
                       singularity_hints=(hint, None))
    return integrate(lambda z: np.asarray(z) ** weight_power
                     * directing.density(z), q).value


def _coverage_norm(directing):
    '''int min(1, z) nu*(z) dz, the scale the tail-mass threshold is
    relative to.'''
    lo, hi = directing.support
    total = _weighted_mass(directing, min(1.0, hi))
    if hi > 1.0:
        total += directing.tail_integral(1.0)
    return total


def _solve_residual_level(directing, target):
    '''Largest z with int_lo^z s nu*(s) ds <= target, by bisection in
    log z.'''
    lo, hi = directing.support
    upper = min(hi, 1.0) if math.isinf(hi) else hi
    z_hi = upper * 0.5
    if _weighted_mass(directing, z_hi) <= target:
        return z_hi
    z_lo = z_hi
    for _ in range(200):
        z_lo *= 0.125
        if _weighted_mass(directing, z_lo) <= target:
            break
    else:
        raise ValueError('cannot bracket the truncation level')
    for _ in range(80):
        mid = math.sqrt(z_lo * z_hi)
        if _weighted_mass(directing, mid) <= target:
            z_lo = mid
        else:
            z_hi = mid
    return z_lo


def _inverse_tail_interpolant(spec, z_floor):
    '''Monotone log-log interpolant for z = U*^-1(y), valid for
    y <= U*(z_floor); clamped outside the table.'''
    key = _family_key(spec) + (round(math.log(z_floor), 3),)
    hit = _GRID_CACHE.get(key)
    if hit is not None:
        return hit
    directing = spec.directing
    lo, hi = directing.support
    if math.isinf(hi):
        zs = np.geomspace(z_floor, max(1.0, 1e4 * z_floor), 600)
        # extend upward until the tail integral is tiny
        top = zs[-1]
        while directing.tail_integral(top) > 1e-12:
            top *= 10.0
            if top > 1e300:
                break
        zs = np.unique(np.concatenate(
            [zs, np.geomspace(zs[-1], top, 200)]))
    else:
        body = np.geomspace(z_floor, 0.5 * hi, 500)
        edge = hi - (hi - 0.5 * hi) * np.geomspace(1e-14, 1.0, 200)
        zs = np.unique(np.concatenate([body, edge]))
        zs = zs[(zs > lo) & (zs < hi)]
    tails = np.array([directing.tail_integral(float(z)) for z in zs])
    keep = tails > 0.0
    zs, tails = zs[keep], tails[keep]
    order = np.argsort(tails)
    log_u, idx = np.unique(np.log(tails[order]), return_index=True)
    log_z = np.log(zs[order])[idx]
    curve = PchipInterpolator(log_u, log_z, extrapolate=False)

    def inverse(y):
        y = np.asarray(y, dtype=float)
        t = np.clip(np.log(y), log_u[0], log_u[-1])
        return np.exp(curve(t))

    result = (inverse, float(tails.max()))
    _GRID_CACHE[key] = result
    return result


def _inverse_tail(spec, y_max):
    '''Callable mapping arrival levels y to jump sizes, valid to y_max.'''
    directing = spec.directing
    if directing._inverse_fn is not None:
        return directing._inverse_fn
    # round the requested reach up to a power of two so repeated draws
    # share one table, with the floor a little below where it lands
    y_cap = 2.0 ** math.ceil(math.log2(max(y_max, 1.0)))
    key = _family_key(spec) + ('inverse', y_cap)
    hit = _GRID_CACHE.get(key)
    if hit is None:
        lo, hi = directing.support
        # jumps smaller than this underflow everything downstream, so
        # arrivals past the matching level clamp to the table floor
        floor_abs = 1e-280 if math.isinf(hi) else 1e-280 * (hi - lo)
        try:
            z_root = directing.inverse_tail(1.5 * y_cap)
        except RuntimeError:
            z_root = 4.0 * floor_abs
        z_floor = max(0.25 * z_root, floor_abs)
        inverse, reach = _inverse_tail_interpolant(spec, z_floor)
        if reach < y_max and z_floor > 2.0 * floor_abs:
            raise ValueError('arrival levels exceed the tabulated tail range')
        hit = inverse
        _GRID_CACHE[key] = hit
    return hit


def sample_corm(spec, rng, n_jumps=None, tail_mass=None, max_jumps=100_000):
    '''
    Draw a truncated realization.  Exactly one truncation rule applies:
    a fixed jump count n_jumps, or a residual directing mass tail_mass
    relative to int min(1,z) nu* (default 1e-6).  Stable-type directing
    measures keep infinite expected mass near zero, so they always
    truncate by count.
    '''
    if n_jumps is not None and tail_mass is not None:
        raise ValueError('give either n_jumps or tail_mass, not both')
    directing = spec.directing
    alpha = spec.centring_mass

    if spec.marginal.kind == 'sigma-stable' and n_jumps is None:
        warnings.warn('stable directing has no finite residual-mass '
                      'criterion; truncating at %d jumps'
                      % STABLE_DEFAULT_JUMPS, stacklevel=2)
        n_jumps = STABLE_DEFAULT_JUMPS

    if n_jumps is not None:
        n = int(n_jumps)
        if n < 0:
            raise ValueError('n_jumps must be nonnegative')
        if n > max_jumps:
            raise ValueError('n_jumps exceeds the jump budget %d' % max_jumps)
        if n == 0:
            return CoRMRealization(
                np.empty(0), np.empty(0), np.empty((spec.dimension, 0)), 0.0)
        arrivals = np.cumsum(rng.exponential(size=n))
        inverse = _inverse_tail(spec, (n + 10.0 * math.sqrt(n) + 10.0) / alpha)
        jumps = np.asarray(inverse(arrivals / alpha), dtype=float)
        level = float(jumps[-1])
    else:
        eps = DEFAULT_TAIL_MASS if tail_mass is None else float(tail_mass)
        if not eps > 0.0:
            raise ValueError('tail_mass must be positive')
        ckey = _family_key(spec) + (eps,)
        cached = _TRUNC_CACHE.get(ckey)
        if cached is None:
            target = eps * _coverage_norm(directing)
            level = _solve_residual_level(directing, target)
            cached = (level, directing.tail_integral(level))
            _TRUNC_CACHE[ckey] = cached
        level, unit_cap = cached
        arrival_cap = alpha * unit_cap
        expected = arrival_cap
        if expected > max_jumps:
            raise ValueError(
                'tail_mass %g needs about %.0f jumps, over the budget %d; '
                'loosen it or raise max_jumps' % (eps, expected, max_jumps))
        n = int(rng.poisson(arrival_cap))
        if n > max_jumps:
            raise ValueError('jump budget %d exceeded' % max_jumps)
        arrivals = np.sort(rng.uniform(0.0, arrival_cap, size=n))
        inverse = _inverse_tail(spec, arrival_cap / alpha)
        jumps = np.asarray(inverse(arrivals / alpha), dtype=float)

    # interpolation can produce ties at clamped table ends; nudge them
    # so the ordering stays strict
    for i in range(1, jumps.size):
        if jumps[i] >= jumps[i - 1]:
            jumps[i] = jumps[i - 1] * (1.0 - 1e-12)

    base = spec.base
    if base is None:
        locations = rng.uniform(size=jumps.size)
    elif hasattr(base, 'sample'):
        locations = np.asarray(base.sample(rng, jumps.size))
    else:
        raise TypeError('centring base must provide sample(rng, n)')
    scores = rng.gamma(spec.shape, size=(spec.dimension, jumps.size))
    return CoRMRealization(jumps, locations, scores, float(level))


def normalize(realization):
    '''Per-coordinate normalised weights of a realization.'''
    if realization.jump_count == 0:
        raise ValueError('cannot normalise an empty realization')
    weighted = realization.scores * realization.jumps
    totals = weighted.sum(axis=1, keepdims=True)
    if not np.all(totals > 0.0):
        raise ValueError('a coordinate has zero total mass')
    pi = weighted / totals
    pi = pi / pi.sum(axis=1, keepdims=True)
    return NormalizedWeights(pi)


def score_ratio_sample(shape, n, rng):
    '''n independent ratios of two Ga(shape) scores.'''
    if n < 1:
        raise ValueError('n must be at least 1')
    if not shape > 0.0:
        raise ValueError('shape must be positive')
    return rng.gamma(shape, size=n) / rng.gamma(shape, size=n)


def realization_to_csv(realization, path):
    '''Dump a realization as CSV: jump_index, J, location, m_1..m_d.'''
    loc = np.asarray(realization.locations)
    if loc.ndim != 1:
        raise ValueError('CSV dump needs scalar locations')
    d = realization.scores.shape[0]
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['jump_index', 'J', 'location']
                        + ['m_%d' % (j + 1) for j in range(d)])
        for i in range(realization.jump_count):
            writer.writerow(
                [i + 1, repr(float(realization.jumps[i])),
                 repr(float(loc[i]))]
                + [repr(float(realization.scores[j, i])) for j in range(d)])
