'''
Adaptive quadrature and the special functions needed by the intensity
formulas.

The quadrature is Gauss-Kronrod 15(7) with global bisection.  Endpoint
singularities of known algebraic order are removed by a power substitution
before any panel is evaluated, and infinite upper limits are mapped to (0,1)
with z = lower + t/(1-t).  Integrands must accept numpy arrays (they are
evaluated 15 points at a time).
'''

import heapq
import math

import numpy as np
from dataclasses import dataclass
from scipy import special as _sp

__all__ = [
    'QuadratureSpec', 'IntegralResult', 'QuadratureError',
    'integrate', 'bessel_k', 'kummer_u', 'whittaker_w',
]

# ---------------------------------------------------------------------------
# Gauss-Kronrod 15 point rule (7 point Gauss embedded at the odd indices)
# ---------------------------------------------------------------------------

_XGK = np.array([
    -0.991455371120813, -0.949107912342759, -0.864864423359769,
    -0.741531185599394, -0.586087235467691, -0.405845151377397,
    -0.207784955007898, 0.0, 0.207784955007898, 0.405845151377397,
    0.586087235467691, 0.741531185599394, 0.864864423359769,
    0.949107912342759, 0.991455371120813,
])
_WGK = np.array([
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728, 0.204432940075298,
    0.190350578064785, 0.169004726639267, 0.140653259715525,
    0.104790010322250, 0.063092092629979, 0.022935322010529,
])
_WG = np.array([
    0.129484966168870, 0.279705391489277, 0.381830050505119,
    0.417959183673469, 0.381830050505119, 0.279705391489277,
    0.129484966168870,
])

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class QuadratureSpec:
    '''
    Description of one definite integral.

    lower, upper        : interval endpoints; upper may be numpy.inf
    relative_tolerance,
    absolute_tolerance  : the run stops once the summed panel error estimate
                          drops below max(abs_tol, rel_tol * |value|)
    singularity_hints   : pair (p_lower, p_upper) of endpoint exponents, or
                          None where the integrand is regular.  p_lower means
                          integrand ~ (z - lower)^p near the lower endpoint;
                          for a finite upper endpoint, ~ (upper - z)^p; for an
                          infinite upper endpoint, ~ z^p as z -> inf (p < -1).
    max_evaluations     : budget of integrand evaluations.
    '''
    lower: float
    upper: float
    relative_tolerance: float = 1e-9
    absolute_tolerance: float = 1e-12
    singularity_hints: tuple = (None, None)
    max_evaluations: int = 100_000

    def __post_init__(self):
        self.validate()

    def validate(self):
        if math.isinf(self.lower):
            raise ValueError('infinite lower endpoints are not supported')
        if not self.upper > self.lower:
            raise ValueError(
                'empty or inverted interval (%r, %r)' % (self.lower, self.upper))
        p_lo, p_hi = self.singularity_hints
        if p_lo is not None and p_lo <= -1.0:
            raise ValueError('singularity hint %r is not integrable' % p_lo)
        if p_hi is not None:
            if math.isinf(self.upper):
                if p_hi >= -1.0:
                    raise ValueError('tail decay hint %r is not integrable' % p_hi)
            elif p_hi <= -1.0:
                raise ValueError('singularity hint %r is not integrable' % p_hi)


@dataclass(frozen=True)
class IntegralResult:
    value: float
    error_estimate: float
    evaluations: int


class QuadratureError(RuntimeError):
    '''Raised when the evaluation budget is exhausted before convergence.
    Carries the best estimate reached so far in .best.'''

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


def _panel(f, a, b):
    '''One GK15 evaluation on [a, b]. Returns (value, error_estimate).'''
    c = 0.5 * (a + b)
    h = 0.5 * (b - a)
    x = c + h * _XGK
    y = np.asarray(f(x), dtype=float)
    if not np.all(np.isfinite(y)):
        bad = x[~np.isfinite(y)][0]
        raise ValueError('integrand returned a non-finite value at %r' % bad)
    resk = h * float(y @ _WGK)
    resg = h * float(y[1::2] @ _WG)
    resabs = abs(h) * float(np.abs(y) @ _WGK)
    mean = resk / (b - a) if b != a else 0.0
    resasc = abs(h) * float(np.abs(y - mean) @ _WGK)
    err = abs(resk - resg)
    if resasc != 0.0 and err != 0.0:
        err = resasc * min(1.0, (200.0 * err / resasc) ** 1.5)
    err = max(err, 50.0 * _EPS * resabs)
    return resk, err


def _power_lower(g, a, b, p):
    '''Substitute z = a + u^gamma so a (z-a)^p endpoint becomes regular.
    When u^gamma rounds below the float spacing at a, the evaluation
    point is pulled one ulp inside and the (z-a)^p factor is rescaled to
    the exactly-known distance u^gamma, so g is never evaluated at its
    singular endpoint.'''
    gamma = 1.0 / (1.0 + p)
    top = (b - a) ** (1.0 / gamma)
    inner = np.nextafter(a, b)

    def h(u):
        u = np.asarray(u, dtype=float)
        w = u ** gamma
        t = a + w
        wf = t - a
        t = np.where(wf > 0.0, t, inner)
        wf = t - a
        corr = np.where(w == wf, 1.0, (w / wf) ** p)
        return g(t) * corr * (gamma * u ** (gamma - 1.0))

    return h, 0.0, top


def _power_upper(g, a, b, p):
    gamma = 1.0 / (1.0 + p)
    top = (b - a) ** (1.0 / gamma)
    inner = np.nextafter(b, a)

    def h(u):
        u = np.asarray(u, dtype=float)
        w = u ** gamma
        t = b - w
        wf = b - t
        t = np.where(wf > 0.0, t, inner)
        wf = b - t
        corr = np.where(w == wf, 1.0, (w / wf) ** p)
        return g(t) * corr * (gamma * u ** (gamma - 1.0))

    return h, 0.0, top


def _build_pieces(f, spec):
    '''Apply the infinite-domain map and any power substitutions, returning
    a list of (integrand, a, b) with regular endpoints.'''
    lo, hi = float(spec.lower), float(spec.upper)
    p_lo, p_hi = spec.singularity_hints

    if math.isinf(hi):
        base = f
        if p_hi is not None:
            # split off the tail at a finite point and fold the decay
            # exponent into the map, so no small quantity is reconstructed
            # by cancellation
            zc = lo + 1.0
            q = -p_hi - 2.0  # exponent at s = 0 of f(zc + (1-s)/s) / s^2
            if q != 0.0:
                gamma = 1.0 / (1.0 + q)

                def tail(w):
                    s = w ** gamma
                    return (base(zc + (1.0 - s) / s) / (s * s)
                            * (gamma * w ** (gamma - 1.0)))
            else:
                def tail(s):
                    return base(zc + (1.0 - s) / s) / (s * s)

            pieces = _build_pieces(base, QuadratureSpec(
                lo, zc, singularity_hints=(p_lo, None)))
            pieces.append((tail, 0.0, 1.0))
            return pieces

        def g(t):
            s = 1.0 - t
            return base(lo + t / s) / (s * s)

        f, a, b = g, 0.0, 1.0
        p_hi = None
    else:
        a, b = lo, hi

    sub_lo = p_lo is not None and p_lo != 0.0
    sub_hi = p_hi is not None and p_hi != 0.0
    if sub_lo and sub_hi:
        mid = 0.5 * (a + b)
        return [_power_lower(f, a, mid, p_lo), _power_upper(f, mid, b, p_hi)]
    if sub_lo:
        return [_power_lower(f, a, b, p_lo)]
    if sub_hi:
        return [_power_upper(f, a, b, p_hi)]
    return [(f, a, b)]


def integrate(f, spec):
    '''
    Evaluate the integral described by `spec`.

    Returns an IntegralResult.  Raises ValueError if the integrand produces
    non-finite values or the spec is malformed, and QuadratureError (carrying
    the best estimate) if the evaluation budget runs out first.
    '''
    pieces = _build_pieces(f, spec)
    heap = []
    count = 0
    evals = 0
    total = 0.0
    total_err = 0.0
    done_val = 0.0   # panels too narrow to split further
    done_err = 0.0
    for g, a, b in pieces:
        val, err = _panel(g, a, b)
        evals += 15
        heapq.heappush(heap, (-err, count, a, b, val, err, g))
        count += 1
        total += val
        total_err += err

    while True:
        tol = max(spec.absolute_tolerance,
                  spec.relative_tolerance * abs(total + done_val))
        if total_err + done_err <= tol or not heap:
            break
        if evals + 30 > spec.max_evaluations:
            best = IntegralResult(total + done_val, total_err + done_err, evals)
            raise QuadratureError(
                'no convergence within %d evaluations (estimate %r, error %r)'
                % (spec.max_evaluations, best.value, best.error_estimate), best)
        neg_err, _, a, b, val, err, g = heapq.heappop(heap)
        total -= val
        total_err -= err
        mid = 0.5 * (a + b)
        # panels narrower than float spacing or whose error estimate sits
        # at the roundoff floor cannot improve; retire them as they are
        if mid - a <= 32.0 * _EPS * max(abs(a), abs(b), 1.0) \
                or err <= 64.0 * _EPS * abs(val):
            done_val += val
            done_err += err
            continue
        for (aa, bb) in ((a, mid), (mid, b)):
            v, e = _panel(g, aa, bb)
            evals += 15
            heapq.heappush(heap, (-e, count, aa, bb, v, e, g))
            count += 1
            total += v
            total_err += e

    return IntegralResult(total + done_val, total_err + done_err, evals)


# ---------------------------------------------------------------------------
# Special functions
# ---------------------------------------------------------------------------

def bessel_k(order, x):
    '''Modified Bessel function of the second kind, K_order(x), x > 0.'''
    if np.any(np.asarray(x) <= 0.0):
        raise ValueError('bessel_k requires x > 0')
    return _sp.kv(abs(order), x)


def _kummer_u_integral(a, b, x, rel_tol=1e-11):
    '''U(a,b,x) for a > 0 from its exponential integral representation.'''
    la = _sp.gammaln(a)

    def g(t):
        return np.exp(-x * t + (a - 1.0) * np.log(t)
                      + (b - a - 1.0) * np.log1p(t) - la)

    spec = QuadratureSpec(0.0, np.inf, relative_tolerance=rel_tol,
                          absolute_tolerance=0.0,
                          singularity_hints=(a - 1.0 if a < 1.0 else None, None))
    return integrate(g, spec).value


def kummer_u(a, b, x):
    '''
    Confluent hypergeometric function of the second kind U(a, b, x), x > 0.

    For a > 0 this is the exponential integral representation; for a <= 0 it
    is continued with the three-term recurrence in a, seeded from two
    integral evaluations.
    '''
    a, b, x = float(a), float(b), float(x)
    if x <= 0.0:
        raise ValueError('kummer_u requires x > 0')
    if a > 0.0:
        return _kummer_u_integral(a, b, x)
    if a == 0.0:
        return 1.0
    steps = int(math.ceil(-a))
    a0 = a + steps  # in (0, 1], or 0 when a is a nonpositive integer
    if steps > 400:
        raise ValueError('kummer_u: a = %r too negative for stable recurrence' % a)
    if a0 == 0.0:
        u_mid, u_hi = 1.0, _kummer_u_integral(1.0, b, x)
        a_cur = 0.0
    else:
        u_mid = _kummer_u_integral(a0, b, x)
        u_hi = _kummer_u_integral(a0 + 1.0, b, x)
        a_cur = a0
    # downward in a: U(a-1) = (2a - b + x) U(a) - a (1 + a - b) U(a+1)
    while a_cur > a:
        u_lo = (2.0 * a_cur - b + x) * u_mid - a_cur * (1.0 + a_cur - b) * u_hi
        u_hi, u_mid = u_mid, u_lo
        a_cur -= 1.0
    return u_mid


def whittaker_w(k, mu, x):
    '''
    Whittaker function W_{k, mu}(x), x > 0.  Symmetric in the sign of mu;
    evaluated through U with the positive choice so the first argument of U
    stays as large as possible.
    '''
    x = float(x)
    if x <= 0.0:
        raise ValueError('whittaker_w requires x > 0')
    am = abs(float(mu))
    u = kummer_u(am - k + 0.5, 1.0 + 2.0 * am, x)
    return math.exp(-0.5 * x + (am + 0.5) * math.log(x)) * u
