"""Shared adaptive quadrature for Levy-measure and generator integrals.

Every integral against a Levy measure in this package funnels through
:func:`integrate`, so tolerances and singularity handling live in one place.
Integrands are split at caller-supplied breakpoints (support edges, the z = 1
compensation threshold, density discontinuities) and the piece touching zero
is further subdivided geometrically, which keeps scipy's QUADPACK happy on
integrable power singularities.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import integrate as _sciint

# Defaults per the certificate pipeline's needs; callers may override.
ABS_TOL = 1e-10
REL_TOL = 1e-8
_LIMIT = 200


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to converge on a subinterval."""

    def __init__(self, message, interval=None):
        super().__init__(message)
        self.interval = interval


def _pieces(lo, hi, breakpoints):
    pts = [lo]
    for b in sorted(set(float(p) for p in breakpoints)):
        if lo < b < hi:
            pts.append(b)
    pts.append(hi)
    return list(zip(pts[:-1], pts[1:]))


def _quad_piece(fn, a, b, abs_tol, rel_tol):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", _sciint.IntegrationWarning)
        val, err, info, *msg = _sciint.quad(
            fn, a, b, epsabs=abs_tol, epsrel=rel_tol, limit=_LIMIT, full_output=1
        )
    if msg:
        # QUADPACK gave up; accept the value only if the error estimate is
        # still meaningfully below the result scale.
        if not np.isfinite(val) or err > max(100 * abs_tol, 1e-4 * max(1.0, abs(val))):
            raise QuadratureError(
                f"quadrature did not converge on [{a:g}, {b:g}]: {msg[0]}",
                interval=(a, b),
            )
    if not np.isfinite(val):
        raise QuadratureError(
            f"quadrature returned non-finite value on [{a:g}, {b:g}]", interval=(a, b)
        )
    return val


def integrate(fn, lo, hi, *, breakpoints=(), abs_tol=ABS_TOL, rel_tol=REL_TOL):
    """Integrate ``fn`` over (lo, hi), hi may be ``np.inf``.

    The interval is split at interior ``breakpoints``; a piece with endpoint 0
    is subdivided geometrically toward the origin so integrable singularities
    at 0+ converge without QUADPACK roundoff complaints.
    """
    lo = float(lo)
    hi = float(hi)
    if hi <= lo:
        return 0.0
    if np.isfinite(hi) and hi > 1e3 * max(lo, 1.0):
        # wide finite ranges defeat QUADPACK outright; split per decade
        k0 = math.ceil(math.log10(max(lo, 1.0)))
        decades = [10.0**k for k in range(k0, int(math.log10(hi)) + 1)]
        breakpoints = tuple(breakpoints) + tuple(decades)
    total = 0.0
    for a, b in _pieces(lo, hi, breakpoints):
        if a == 0.0 and np.isfinite(b):
            # geometric subdivision toward the origin-side singularity
            cuts = [b * 10.0**-k for k in range(6, 0, -1) if b * 10.0**-k > 0]
            prev = 0.0
            for c in cuts + [b]:
                total += _quad_piece(fn, prev, c, abs_tol, rel_tol)
                prev = c
        else:
            total += _quad_piece(fn, a, b, abs_tol, rel_tol)
    return total


def lower_integral(fn, lo, hi, *, abs_tol=ABS_TOL, rel_tol=REL_TOL):
    """Integrate ``fn`` over (lo, hi] when fn may blow up at lo+.

    Returns ``(value, converged)``; dyadic shells shrinking toward ``lo``
    must decline geometrically, otherwise the singularity is non-integrable
    and ``(inf, False)`` is returned.
    """
    lo = float(lo)
    hi = float(hi)
    if hi <= lo:
        return 0.0, True
    w = hi - lo
    total = 0.0
    incs = []
    for k in range(48):
        a = lo + w * 2.0 ** -(k + 1)
        b = lo + w * 2.0**-k
        inc = _quad_piece(fn, a, b, abs_tol, rel_tol)
        incs.append(inc)
        total += inc
        if k >= 3 and abs(inc) < max(abs_tol, 1e-13 * abs(total)):
            return total, True
        if k >= 6:
            ratios = [
                abs(i2) / abs(i1) for i1, i2 in zip(incs[-4:-1], incs[-3:]) if abs(i1) > 0
            ]
            if ratios and min(ratios) >= 0.95:
                return np.inf, False
    rho = abs(incs[-1]) / abs(incs[-2]) if abs(incs[-2]) > 0 else 0.0
    if rho >= 0.95:
        return np.inf, False
    total += abs(incs[-1]) * rho / (1.0 - rho) if rho > 0 else 0.0
    return total, True


def tail_integral(fn, lo, *, abs_tol=ABS_TOL, rel_tol=REL_TOL):
    """Integrate ``fn`` over (lo, inf), reporting divergence.

    Returns ``(value, converged)``; a divergent tail yields ``(inf, False)``.
    Decade increments over (H, 10H) must settle into a geometric decline;
    a final decade ratio at or above ~1 (the 1/z boundary) is divergent.
    """
    lo = max(float(lo), 0.0)
    horizons = [max(lo, 1.0) * 10.0**k for k in range(0, 12)]
    total = integrate(fn, lo, horizons[0], abs_tol=abs_tol, rel_tol=rel_tol)
    incs = []
    for a, b in zip(horizons[:-1], horizons[1:]):
        incs.append(_quad_piece(fn, a, b, abs_tol, rel_tol))
    scale = max(1.0, abs(total))
    ratios = [
        abs(i2) / abs(i1)
        for i1, i2 in zip(incs[:-1], incs[1:])
        if abs(i1) > 1e-13 * scale and abs(i2) > 1e-13 * scale
    ]
    total += sum(incs)
    if not ratios or abs(incs[-1]) <= 1e-12 * scale:
        return total, True
    rho = ratios[-1]
    if rho >= 0.95 or any(r >= 1.0 for r in ratios[-3:]):
        return np.inf, False
    # bound the remaining tail by the trailing geometric envelope
    total += abs(incs[-1]) * rho / (1.0 - rho)
    return total, True
