"""Overlap-measure algebra shared by the coupling simulator and certificates.

For a sigma-finite measure m on (0, inf) and a shift x, the overlap measure

    m_x(dz) = (1/2) [m ^ (delta_x * m)](dz)

is the common part of m and its x-shift.  Its total mass drives the merge and
gap-doubling jump rates of the coupled process, and the normalized ratio
m_x(dz)/m(dz) supplies the disassembly thresholds.  Key facts used below:
m_x(0, 0 v x] = 0, m_x(0, inf) = m_{-x}(0, inf) <= m(|x|, inf)/2.

Atoms only pair under exact location equality after the shift (1e-12 slack):
the infimum of measures is singular-part aware, and approximate matching
would inflate the overlap.  Cross terms between atom and density parts are
taken to be zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import quadrature
from .mechanisms import LevyMeasure, ModelSpec

ATOM_SLACK = 1e-12


def _atom_mass_at(base: LevyMeasure, loc: float) -> float:
    for a, m in base.atoms():
        if abs(a - loc) <= ATOM_SLACK * max(1.0, abs(a)):
            return m
    return 0.0


def overlap_atoms(base: LevyMeasure, x: float):
    """Atoms of the overlap measure: (loc, min(m(loc), m(loc-x))/2) pairs."""
    out = []
    for a, m in base.atoms():
        shifted = _atom_mass_at(base, a - x) if a - x > 0 else 0.0
        if shifted > 0:
            out.append((a, 0.5 * min(m, shifted)))
    return tuple(out)


def overlap_density(base: LevyMeasure, x: float, z):
    """Density of the overlap measure: min(f(z), f(z-x))/2, f extended by 0."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    fz = base.density(z)
    fzx = base.density(z - x)
    out = 0.5 * np.minimum(fz, fzx)
    out[z <= 0] = 0.0
    return out


def _is_decreasing_density(base: LevyMeasure) -> bool:
    return base.kind == "stable"


def overlap_mass(base: LevyMeasure, x: float, lo: float = 0.0, hi: float = math.inf) -> float:
    """Total overlap mass over (lo, hi); may be inf (a valid, favorable flag).

    For a monotone-decreasing density the mass reduces to half a tail mass of
    the base measure, which is exact for the stable family.
    """
    x = float(x)
    lo = max(float(lo), 0.0)
    hi = float(hi)
    if base.is_zero or hi <= lo:
        return 0.0
    total = sum(m for a, m in overlap_atoms(base, x) if lo < a <= hi)
    if base.kind == "atoms":
        return total
    if base.kind == "sum":
        return sum(overlap_mass(p, x, lo, hi) for p in base.parts)
    if _is_decreasing_density(base):
        # min(f(z), f(z-x)) = f(z + |x| - max(x, 0)) on the overlap region
        if x >= 0:
            a, b = max(lo, x), hi
            if b <= a:
                return 0.0
            return 0.5 * (base.mass_above(a) - (0.0 if not np.isfinite(b) else base.mass_above(b)))
        a, b = lo - x, (hi - x if np.isfinite(hi) else math.inf)
        return 0.5 * (base.mass_above(a) - (0.0 if not np.isfinite(b) else base.mass_above(b)))
    slo, shi = base.density_support()
    a = max(lo, slo, slo + x, 0.0 if x <= 0 else x)
    b = min(hi, shi, shi + x)
    if b <= a:
        return total
    if not np.isfinite(b):
        val, ok = quadrature.tail_integral(lambda z: float(overlap_density(base, x, z)[0]), a)
        return total + (val if ok else math.inf)
    pts = tuple(base.breakpoints()) + tuple(p + x for p in base.breakpoints())
    total += quadrature.integrate(
        lambda z: float(overlap_density(base, x, z)[0]), a, b, breakpoints=pts
    )
    return total


def overlap_integrate(base: LevyMeasure, x: float, fn, lo: float = 0.0, hi: float = math.inf) -> float:
    """int fn(z) m_x(dz) over (lo, hi)."""
    x = float(x)
    lo = max(float(lo), 0.0)
    hi = float(hi)
    if base.is_zero or hi <= lo:
        return 0.0
    total = sum(m * float(fn(a)) for a, m in overlap_atoms(base, x) if lo < a <= hi)
    if base.kind == "atoms":
        return total
    if base.kind == "sum":
        return sum(overlap_integrate(p, x, fn, lo, hi) for p in base.parts)
    slo, shi = base.density_support()
    a = max(lo, slo, slo + x, 0.0 if x <= 0 else x)
    b = min(hi, shi, shi + x)
    if b <= a:
        return total
    pts = tuple(base.breakpoints()) + tuple(p + x for p in base.breakpoints())
    integrand = lambda z: float(fn(z)) * float(overlap_density(base, x, z)[0])
    if not np.isfinite(b):
        val, ok = quadrature.tail_integral(integrand, a)
        if not ok:
            return math.inf
        return total + val
    return total + quadrature.integrate(integrand, a, b, breakpoints=pts)


def kappa(model: ModelSpec, x: float) -> float:
    """Fluctuation function [mu ^ (delta_x*mu)](0,inf) + [nu ^ (delta_x*nu)](0,inf).

    Twice the overlap masses (the overlap measure carries a 1/2 the fluctuation
    condition does not).  inf is a valid, favorable outcome.
    """
    return 2.0 * overlap_mass(model.mu, x) + 2.0 * overlap_mass(model.nu, x)


def rn_ratio(base: LevyMeasure, x: float, z):
    """Disassembly threshold m_x(dz)/m(dz) in [0, 1/2] (vectorized in z).

    Density part: min(1, f(z-x)/f(z))/2 where the base density is positive;
    atoms match only at exactly shifted locations; everything else is 0.
    """
    x = float(x)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return rn_ratio_many(base, np.full_like(z, x), z)


def rn_ratio_many(base: LevyMeasure, x, z):
    """rn_ratio with elementwise shifts (pairwise over matching arrays)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    fz = base.density(z)
    fzx = base.density(z - x)
    out = np.zeros_like(fz)
    pos = fz > 0
    out[pos] = 0.5 * np.minimum(1.0, fzx[pos] / fz[pos])
    atoms = base.atoms()
    for a, m in atoms:
        mask = np.abs(z - a) <= ATOM_SLACK * max(1.0, abs(a))
        if mask.any():
            shifted = np.zeros(int(mask.sum()))
            target = a - x[mask]
            for b_loc, b_mass in atoms:
                hit = (np.abs(target - b_loc) <= ATOM_SLACK * max(1.0, abs(b_loc))) & (target > 0)
                shifted[hit] = b_mass
            out[mask] = 0.5 * np.minimum(1.0, shifted / m)
    out[z <= np.maximum(0.0, x)] = 0.0
    return out
