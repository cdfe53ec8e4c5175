"""Regularized incomplete gamma, its inverse, and the normal quantile."""
from __future__ import annotations

import math

from .errors import InvalidParameterError, NumericalError

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 500


def _gamma_series(a: float, x: float) -> float:
    # P(a, x) by its power series, good for x < a + 1
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise NumericalError(f"gamma series did not converge (a={a}, x={x})")


def _gamma_cfrac(a: float, x: float) -> float:
    # Q(a, x) by modified Lentz continued fraction, good for x >= a + 1
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = _TINY if abs(d) < _TINY else d
        c = b + an / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise NumericalError(f"gamma continued fraction did not converge (a={a}, x={x})")


def reg_lower_gamma(a: float, x: float) -> float:
    """Regularized lower incomplete gamma ``P(a, x)``."""
    if a <= 0:
        raise InvalidParameterError("shape a must be positive")
    if x < 0:
        raise InvalidParameterError("x must be non-negative")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cfrac(a, x)


def reg_upper_gamma(a: float, x: float) -> float:
    """Regularized upper incomplete gamma ``Q(a, x) = 1 - P(a, x)``."""
    if a <= 0:
        raise InvalidParameterError("shape a must be positive")
    if x < 0:
        raise InvalidParameterError("x must be non-negative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cfrac(a, x)


def _initial_guess(p: float, a: float) -> float:
    if a > 1.0:
        # Wilson-Hilferty via the normal quantile
        z = normal_quantile(p)
        x = a * (1.0 - 1.0 / (9.0 * a) + z / (3.0 * math.sqrt(a))) ** 3
        return max(x, 1e-3)
    t = 1.0 - a * (0.253 + a * 0.12)
    if p < t:
        return (p / t) ** (1.0 / a)
    return 1.0 - math.log(1.0 - (p - t) / (1.0 - t))


def inv_reg_lower_gamma(p: float, a: float, tol: float = 1e-13) -> float:
    """Return ``x`` with ``P(a, x) = p``.

    Halley iterations on ``P(a, x) - p`` from a closed-form starting point,
    with a bracketing interval kept for a bisection fallback.
    """
    if not 0.0 < p < 1.0:
        raise InvalidParameterError("p must lie in (0, 1)")
    if a <= 0:
        raise InvalidParameterError("shape a must be positive")
    lga = math.lgamma(a)
    lo, hi = 0.0, math.inf
    x = _initial_guess(p, a)
    for _ in range(200):
        if x <= 0.0 or not math.isfinite(x):
            x = 0.5 * (lo + (hi if math.isfinite(hi) else 2.0 * lo + 1.0))
        # work with the smaller tail to keep relative precision
        if p < 0.5:
            err = reg_lower_gamma(a, x) - p
        else:
            err = (1.0 - p) - reg_upper_gamma(a, x)
        if err > 0:
            hi = min(hi, x)
        else:
            lo = max(lo, x)
        if abs(err) < tol * min(p, 1.0 - p) or (math.isfinite(hi) and hi - lo < 1e-15 * hi):
            return x
        density = math.exp((a - 1.0) * math.log(x) - x - lga)
        if density == 0.0:
            step = math.inf
        else:
            newton = err / density
            step = newton / (1.0 - 0.5 * min(1.0, newton * ((a - 1.0) / x - 1.0)))
        x_new = x - step
        if not (lo < x_new < hi) or not math.isfinite(x_new):
            x_new = 0.5 * (lo + hi) if math.isfinite(hi) else max(2.0 * x, x + 1.0)
        x = x_new
    raise NumericalError(f"inverse incomplete gamma did not converge (p={p}, a={a})")


# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF (probit)."""
    if not 0.0 < p < 1.0:
        raise InvalidParameterError("p must lie in (0, 1)")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        z = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        z = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        z = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    # one Halley refinement against the exact CDF
    if p < 0.5:
        e = normal_cdf(z) - p
    else:
        e = (1.0 - p) - 0.5 * math.erfc(z / math.sqrt(2.0))
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * z * z)
    return z - u / (1.0 + 0.5 * z * u)
