"""Generator evaluation, Lyapunov certification and coupling-generator bounds.

The process generator acts on twice-differentiable f as

    Lf(x) = c x f''(x) + x int [f(x+z)-f(x) - z f'(x) 1{z<=1}] mu(dz)
          + [beta - b x - g(x)] f'(x) + int [f(x+z)-f(x)] nu(dz).

A weight V is a Lyapunov function when LV <= C0 - C1 V everywhere; the
built-in weights are V1(x) = x and Vlog(x) = log(1+x).

For the coupled pair the control surface is F0(x, y) = phi(x)(1 + psi(x-y))
off the diagonal, with psi(u) = 1 - e^{-lam0 u} and phi a cubic blend that
drops from theta+1 to theta across (0, x0).  The drift of F0 under the
coupling generator is evaluated either through the proof's closed upper bound
(default; this is what the rate certificate needs) or by direct quadrature of
the two-dimensional generator (exact mode, for cross-checking).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .measures import overlap_integrate, overlap_mass
from .mechanisms import LevyMeasure, ModelSpec

__all__ = [
    "WeightFunction",
    "SmoothFunction",
    "GeneratorDomainError",
    "apply_generator",
    "LyapunovDrift",
    "LyapunovCertificate",
    "LyapunovFailure",
    "lyapunov_certify",
    "lyapunov_margin",
    "CouplingControl",
    "coupling_generator_F0",
    "coupling_generator_G0",
    "write_margin_csv",
]


class GeneratorDomainError(ValueError):
    """The requested f lies outside the generator's domain for this model."""


@dataclass(frozen=True)
class SmoothFunction:
    """Plain C^2 test function for apply_generator (no Lyapunov invariants)."""

    value: Callable[[float], float]
    deriv: Callable[[float], float]
    second: Callable[[float], float]
    jump: Optional[Callable[[float, float], float]] = None

    def jump_at(self, x: float, z: float) -> float:
        if self.jump is not None:
            return self.jump(x, z)
        return self.value(x + z) - self.value(x)


@dataclass(frozen=True)
class WeightFunction:
    """Nonnegative weight with V(x) -> inf, V' >= 0 for the built-in kinds."""

    kind: str  # "v1" | "vlog" | "custom"
    value: Callable
    deriv: Callable
    second: Callable
    jump: Callable  # (x, z) -> V(x+z) - V(x)
    tail_exponent: float  # V ~ x^tail_exponent up to logs; 0 means logarithmic

    @classmethod
    def v1(cls) -> "WeightFunction":
        return cls(
            kind="v1",
            value=lambda x: np.asarray(x, dtype=float) + 0.0,
            deriv=lambda x: np.ones_like(np.asarray(x, dtype=float)),
            second=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
            jump=lambda x, z: z + 0.0 * np.asarray(x, dtype=float),
            tail_exponent=1.0,
        )

    @classmethod
    def vlog(cls) -> "WeightFunction":
        return cls(
            kind="vlog",
            value=lambda x: np.log1p(np.asarray(x, dtype=float)),
            deriv=lambda x: 1.0 / (1.0 + np.asarray(x, dtype=float)),
            second=lambda x: -1.0 / (1.0 + np.asarray(x, dtype=float)) ** 2,
            jump=lambda x, z: np.log1p(np.asarray(z, dtype=float) / (1.0 + x)),
            tail_exponent=0.0,
        )

    @classmethod
    def custom(cls, value, deriv, second, jump=None, *, tail_exponent: float) -> "WeightFunction":
        """Custom weight; tail_exponent closes the C0 sup with a tail bound."""
        if jump is None:
            jump = lambda x, z: value(x + z) - value(x)
        w = cls(
            kind="custom", value=value, deriv=deriv, second=second, jump=jump,
            tail_exponent=float(tail_exponent),
        )
        probe = np.array([0.0, 0.5, 1.0, 10.0, 1e4, 1e8])
        vals = np.asarray([float(value(p)) for p in probe])
        if (vals < 0).any():
            raise GeneratorDomainError("weight function must be nonnegative")
        if vals[-1] <= vals[0] + 1.0:
            raise GeneratorDomainError("weight function must diverge as x -> inf")
        return w

    def inverse(self, t: float) -> float:
        """Smallest x with V(x) >= t."""
        if self.kind == "v1":
            return float(t)
        if self.kind == "vlog":
            return math.inf if t > 700.0 else float(np.expm1(t))
        lo, hi = 0.0, 1.0
        while float(self.value(hi)) < t:
            hi *= 4.0
            if hi > 1e300:
                return math.inf
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if float(self.value(mid)) >= t:
                hi = mid
            else:
                lo = mid
        return hi


def _check_tail_flags(model: ModelSpec, f) -> None:
    if not isinstance(f, WeightFunction):
        return
    if f.kind == "v1" or (f.kind == "custom" and f.tail_exponent >= 1.0):
        if not (model.mu.has_finite_linear_tail and model.nu.has_finite_linear_tail):
            raise GeneratorDomainError(
                "linear-growth weight needs finite first-moment tails: "
                "int_1^inf z mu(dz) and int_1^inf z nu(dz) must both converge"
            )
    elif f.kind == "vlog" or f.kind == "custom":
        if not (model.mu.has_finite_log_tail and model.nu.has_finite_log_tail):
            raise GeneratorDomainError(
                "logarithmic weight needs finite log-moment tails: "
                "int_1^inf log(1+z) mu(dz) and int_1^inf log(1+z) nu(dz) must both converge"
            )


def apply_generator(model: ModelSpec, f, x: float) -> float:
    """Evaluate Lf(x) by quadrature against the model's jump measures."""
    if x < 0:
        raise GeneratorDomainError(f"state must be >= 0, got {x}")
    _check_tail_flags(model, f)
    x = float(x)
    if isinstance(f, WeightFunction):
        jump = lambda z: float(f.jump(x, z))
        fp = float(f.deriv(x))
        fpp = float(f.second(x))
    else:
        jump = lambda z: float(f.jump_at(x, z))
        fp = float(f.deriv(x))
        fpp = float(f.second(x))
    mu_int = model.mu.integrate(lambda z: jump(z) - z * fp * (z <= 1.0))
    nu_int = model.nu.integrate(jump)
    drift = model.beta - model.b * x - float(model.g(x))
    return model.c * x * fpp + x * mu_int + drift * fp + nu_int


def _vlog_mu_integral(mu: LevyMeasure, w: float) -> float:
    """int [log(1 + z/w) - (z/w) 1{z<=1}] mu(dz), closed where possible.

    Stable components with index <= 1 reduce through the log-moment identity
    int_0^inf log(1+z/w) z^(-1-a) dz = pi / (a sin(a pi) w^a); everything
    else integrates numerically with the compensation split at z = 1.
    """
    from scipy.special import gamma as _gamma

    if mu.is_zero:
        return 0.0
    if mu.kind == "sum":
        return sum(_vlog_mu_integral(p, w) for p in mu.parts)
    if mu.kind == "stable" and mu.alpha < 1.0:
        a, s = mu.alpha, mu.sigma
        return (
            s * math.pi / (_gamma(1.0 - a) * math.sin(a * math.pi) * w**a)
            - a * s / ((1.0 - a) * _gamma(1.0 - a) * w)
        )
    if mu.kind == "stable" and mu.alpha == 1.0:
        return mu.sigma * (1.0 + math.log(w)) / w
    return mu.integrate(lambda z: math.log1p(z / w) - z / w * (z <= 1.0))


class LyapunovDrift:
    """Memoized LV(x) evaluator through the per-weight closed decompositions.

    V1 reduces to constants; Vlog splits into the compensated small-jump
    integral, the log tail and the immigration log moment (a deliberately
    different assembly from apply_generator's single composite integrand, so
    the two routes cross-check each other).  Values are cached per
    coordinate since grid checks revisit them heavily.
    """

    def __init__(self, model: ModelSpec, weight: WeightFunction):
        _check_tail_flags(model, weight)
        self.model = model
        self.weight = weight
        self._cache: dict = {}
        if weight.kind == "v1":
            self._mu_tail = model.mu.linear_tail()
            self._nu_mean = model.nu.moment(1.0, 0.0, math.inf)

    def __call__(self, x: float) -> float:
        x = float(x)
        if x in self._cache:
            return self._cache[x]
        m = self.model
        if self.weight.kind == "v1":
            val = (m.beta - m.b * x - float(m.g(x))) + x * self._mu_tail + self._nu_mean
        elif self.weight.kind == "vlog":
            w = 1.0 + x
            val = (
                -m.c * x / w**2
                + x * _vlog_mu_integral(m.mu, w)
                + (m.beta - m.b * x - float(m.g(x))) / w
                + m.nu.integrate(lambda z: math.log1p(z / w))
            )
        else:
            val = apply_generator(m, self.weight, x)
        self._cache[x] = val
        return val

    def many(self, xs) -> np.ndarray:
        return np.asarray([self(float(x)) for x in np.asarray(xs, dtype=float)])


@dataclass(frozen=True)
class LyapunovCertificate:
    """Constants with LV(x) <= C0 - C1 V(x) on the check grid and beyond."""

    c0: float
    c1: float
    weight: WeightFunction
    margin: float
    grid_x: np.ndarray
    grid_margin: np.ndarray  # LV + C1 V - C0 (<= 0 everywhere)


@dataclass(frozen=True)
class LyapunovFailure:
    """Why no (C0, C1) pair exists, with the measured asymptotic margin."""

    margin: float
    lv_grid_min: float
    reason: str

    def __str__(self):
        return (
            f"Lyapunov certification failed: {self.reason} "
            f"(asymptotic margin {self.margin:.6g}, grid min LV {self.lv_grid_min:.6g})"
        )


def lyapunov_margin(model: ModelSpec, weight: WeightFunction) -> float:
    """Asymptotic decay margin; a certificate exists iff this is positive.

    Linear weight: liminf g(x)/x + b - int_1^inf z mu(dz).
    Log weight: liminf of g(x)/(x log x) - (x/log x) int_1^inf log(1+z/(1+x)) mu(dz),
    sampled along a large-x ladder.
    """
    if weight.kind == "v1":
        return model.g.linear_liminf() + model.b - model.mu.linear_tail()
    samples = []
    for x in (1e3, 1e4, 1e5, 1e6):
        mu_term = model.mu.integrate(lambda z: math.log1p(z / (1.0 + x)), lo=1.0)
        samples.append(float(model.g(x)) / (x * math.log(x)) - (x / math.log(x)) * mu_term)
    return min(samples)


_C1_CAP = 64.0
_SWEEP_DEPTH = 15


def _lyapunov_grid(weight: WeightFunction) -> np.ndarray:
    return np.concatenate([[0.0], np.geomspace(1e-6, 1e6, 201)])


def _feasible_c0(drift: LyapunovDrift, weight: WeightFunction, c1: float, grid, lv_vals):
    """Minimal C0 for this C1, or None when the sup is not closed by the tail."""
    h = lv_vals + c1 * np.asarray(weight.value(grid), dtype=float)
    if not np.all(np.isfinite(h)):
        return None, h
    tail = h[grid >= 1e3]
    if len(tail) >= 3 and not (np.diff(tail) <= 1e-9 * np.maximum(1.0, np.abs(tail[:-1]))).all():
        return None, h
    sup = float(h.max())
    c0 = max(sup * (1.0 + 1e-9) + 1e-300, 1e-12)
    return c0, h


def lyapunov_candidates(model: ModelSpec, weight: WeightFunction):
    """(margin, [(c1, c0), ...]) with c1 swept geometrically below the margin."""
    drift = LyapunovDrift(model, weight)
    margin = lyapunov_margin(model, weight)
    if margin <= 0:
        return margin, [], drift
    c1max = min(margin, _C1_CAP) if np.isfinite(margin) else _C1_CAP
    grid = _lyapunov_grid(weight)
    lv_vals = drift.many(grid)
    out = []
    for k in range(_SWEEP_DEPTH):
        c1 = c1max * 2.0**-k
        c0, _ = _feasible_c0(drift, weight, c1, grid, lv_vals)
        if c0 is not None:
            out.append((c1, c0))
    return margin, out, drift


def lyapunov_certify(model: ModelSpec, weight: WeightFunction, *, c1: Optional[float] = None):
    """Largest-C1 Lyapunov certificate, or a :class:`LyapunovFailure` report."""
    drift = LyapunovDrift(model, weight)
    grid = _lyapunov_grid(weight)
    lv_vals = drift.many(grid)
    margin = lyapunov_margin(model, weight)
    if c1 is not None:
        c0, h = _feasible_c0(drift, weight, c1, grid, lv_vals)
        if c0 is None:
            return LyapunovFailure(margin, float(lv_vals.min()), f"C1={c1:g} is not feasible")
        return LyapunovCertificate(c0, c1, weight, margin, grid, h - c0)
    if margin <= 0:
        reason = "asymptotic drift margin is not positive"
        if float(lv_vals.min()) > 0:
            reason += "; LV is bounded below by a positive constant on the grid"
        return LyapunovFailure(margin, float(lv_vals.min()), reason)
    margin, cands, _ = lyapunov_candidates(model, weight)
    if not cands:
        return LyapunovFailure(margin, float(lv_vals.min()), "no feasible C1 in the sweep")
    c1, c0 = cands[0]
    h = lv_vals + c1 * np.asarray(weight.value(grid), dtype=float)
    return LyapunovCertificate(c0, c1, weight, margin, grid, h - c0)


# -- coupling control surface -------------------------------------------------


def _em1pu(u: float) -> float:
    """expm1(-u) + u, series-stable for small u (= u^2/2 - u^3/6 + ...)."""
    if abs(u) < 1e-4:
        return u * u * (0.5 - u / 6.0 + u * u / 24.0)
    return math.expm1(-u) + u


@dataclass(frozen=True)
class CouplingControl:
    """Constants and evaluators of the off-diagonal control function F0.

    psi(u) = 1 - e^{-lam0 u}; phi drops cubically from theta+1 at 0 to theta
    at x0; F0(x, y) = phi(x) (1 + psi(x-y)) for x != y and 0 on the diagonal,
    so theta <= F0 <= 2 (1 + theta) off the diagonal.
    """

    lambda0: float
    x0: float
    theta: float
    epsilon: float
    l: float
    psi_at_lambda0: float  # Psi(lambda0) for the model this control was built for

    def __post_init__(self):
        if self.lambda0 <= 0 or not 0.0 < self.x0 < 1.0:
            raise ValueError("coupling control needs lambda0 > 0 and x0 in (0, 1)")
        if self.theta < 4.0 or self.epsilon <= 0 or self.l < 1.0:
            raise ValueError("coupling control needs theta >= 4, epsilon > 0, l >= 1")
        if self.psi_at_lambda0 <= 0:
            raise ValueError("coupling control needs Psi(lambda0) > 0")

    @property
    def lambda1(self) -> float:
        return math.exp(-self.lambda0 * self.l) * self.psi_at_lambda0 / self.lambda0

    def psi(self, u: float) -> float:
        return -math.expm1(-self.lambda0 * u)

    def phi(self, x: float) -> float:
        if x >= self.x0:
            return self.theta
        return self.theta + (1.0 - x / self.x0) ** 3

    def phi_prime(self, x: float) -> float:
        if x >= self.x0:
            return 0.0
        return -3.0 / self.x0 * (1.0 - x / self.x0) ** 2

    def phi_second(self, x: float) -> float:
        if x >= self.x0:
            return 0.0
        return 6.0 / self.x0**2 * (1.0 - x / self.x0)

    def F0(self, x: float, y: float) -> float:
        if x == y:
            return 0.0
        return self.phi(x) * (1.0 + self.psi(x - y))

    def V0(self, weight: WeightFunction, x: float, y: float) -> float:
        if x == y:
            return 0.0
        return float(weight.value(x)) + float(weight.value(y))

    def G0(self, weight: WeightFunction, x: float, y: float) -> float:
        return self.epsilon * self.F0(x, y) + self.V0(weight, x, y)


def _phi_diff_minus_linear(ctrl: CouplingControl, x: float, z: float) -> float:
    """phi(x+z) - phi(x) - phi'(x) z, exact piecewise cubic (no cancellation)."""
    x0 = ctrl.x0
    if x >= x0:
        return 0.0
    w = 1.0 - x / x0
    if x + z < x0:
        h = z / x0
        return h * h * (3.0 * w - h)
    return -(w**3) + 3.0 * w * w * z / x0


def _sweep_nu_term(model: ModelSpec, ctrl: CouplingControl, x: float, gap: float) -> float:
    """int [phi(x+z) - phi(x)] (nu - nu_{y-x})(dz) for x <= x0 (else 0)."""
    if x >= ctrl.x0 or model.nu.is_zero:
        return 0.0
    x0 = ctrl.x0
    phix = ctrl.phi(x)
    body = lambda z: ctrl.phi(x + z) - phix
    cut = x0 - x
    t_nu = model.nu.integrate(body, 0.0, cut) + (ctrl.theta - phix) * model.nu.mass_above(cut)
    t_ov = overlap_integrate(model.nu, -gap, body, 0.0, cut) + (
        ctrl.theta - phix
    ) * overlap_mass(model.nu, -gap, cut, math.inf)
    return t_nu - t_ov


def coupling_generator_F0(
    model: ModelSpec,
    ctrl: CouplingControl,
    x: float,
    y: float,
    *,
    exact: bool = False,
    mu_overlap: Optional[float] = None,
    nu_overlap: Optional[float] = None,
    mu_sq_small: Optional[float] = None,
) -> float:
    """Drift of F0 under the coupling generator at (x, y), x > y >= 0.

    Default mode evaluates the closed upper bound used by the certificate
    chain; ``exact=True`` integrates the two-dimensional generator literally.
    The ``*_overlap`` keywords let grid sweeps reuse cached overlap masses.
    """
    if not x > y >= 0:
        raise ValueError(f"coupling generator needs x > y >= 0, got ({x}, {y})")
    gap = x - y
    if exact:
        return _coupling_F0_exact(model, ctrl, x, y)
    mum = overlap_mass(model.mu, gap) if mu_overlap is None else mu_overlap
    num = overlap_mass(model.nu, gap) if nu_overlap is None else nu_overlap
    psig = ctrl.psi(gap)
    theta = ctrl.theta
    ub = -model.c * ctrl.lambda0**2 * theta * y * math.exp(-ctrl.lambda0 * gap)
    ub -= theta * (y * mum + num)
    if gap <= ctrl.l:
        ub -= ctrl.lambda1 * theta * psig
    if x <= ctrl.x0:
        i_term = (model.beta - model.b * x - float(model.g(x))) * ctrl.phi_prime(x)
        sq = model.mu.moment(2.0, 0.0, 1.0) if mu_sq_small is None else mu_sq_small
        j_term = 3.0 * x / ctrl.x0**2 * (2.0 * model.c + sq)
        ub += (y * mum + i_term + j_term) * (1.0 + psig)
        ub += (1.0 + psig) * _sweep_nu_term(model, ctrl, x, gap)
    return ub


def _coupling_F0_exact(model: ModelSpec, ctrl: CouplingControl, x: float, y: float) -> float:
    gap = x - y
    lam0 = ctrl.lambda0
    phix, phipx, phippx = ctrl.phi(x), ctrl.phi_prime(x), ctrl.phi_second(x)
    psig = ctrl.psi(gap)
    psipg = lam0 * math.exp(-lam0 * gap)
    psippg = -lam0 * psipg
    fx = phipx * (1.0 + psig) + phix * psipg
    # Gaussian block: c x Fxx + c y Fyy - 2 c y Fxy
    gauss = model.c * (
        x * (phippx * (1.0 + psig) + 2.0 * phipx * psipg + phix * psippg)
        + 3.0 * y * phix * psippg
        + 2.0 * y * phipx * psipg
    )
    drift = (model.beta - model.b * x - float(model.g(x))) * fx + (
        model.beta - model.b * y - float(model.g(y))
    ) * (-phix * psipg)

    eg = math.exp(-lam0 * gap)

    def shared_jump(z):  # (1 + psi(gap)) [phi(x+z) - phi(x) - phi'(x) z 1{z<=1}]
        lin = _phi_diff_minus_linear(ctrl, x, z) if z <= 1.0 else ctrl.phi(x + z) - phix
        return (1.0 + psig) * lin

    def leader_jump(z):  # F(x+z, y) - F(x, y) - Fx z 1{z<=1}
        phz = ctrl.phi(x + z)
        dpsi = eg * (-math.expm1(-lam0 * z))  # psi(gap+z) - psi(gap)
        if z <= 1.0:
            a = _phi_diff_minus_linear(ctrl, x, z) * (1.0 + psig + dpsi)
            b = phipx * z * dpsi
            c_ = -phix * eg * _em1pu(lam0 * z)
            return a + b + c_
        return phz * (1.0 + psig + dpsi) - phix * (1.0 + psig)

    nu_shared = model.nu.integrate(lambda z: ctrl.phi(x + z) - phix) * (1.0 + psig)
    mu_leader = model.mu.integrate(leader_jump)
    mu_shared = model.mu.integrate(shared_jump)
    l0 = gauss + drift + nu_shared + gap * mu_leader + y * mu_shared

    dpsi2 = ctrl.psi(2.0 * gap) - psig
    l1 = y * dpsi2 * overlap_integrate(model.mu, gap, lambda z: ctrl.phi(x + z))
    l1 -= y * (1.0 + psig) * overlap_integrate(model.mu, -gap, lambda z: ctrl.phi(x + z))
    l1 += dpsi2 * overlap_integrate(model.nu, gap, lambda z: ctrl.phi(x + z))
    l1 -= (1.0 + psig) * overlap_integrate(model.nu, -gap, lambda z: ctrl.phi(x + z))
    return l0 + l1


def coupling_generator_G0(
    model: ModelSpec,
    ctrl: CouplingControl,
    cert: LyapunovCertificate,
    x: float,
    y: float,
    *,
    exact: bool = False,
    drift_eval: Optional[LyapunovDrift] = None,
    **overlap_kw,
) -> float:
    """Upper bound eps * (coupling drift of F0) + LV(x) + LV(y).

    This is the bound the contraction chain works with: the pure-jump part of
    the coupling generator vanishes on the symmetric weight sum, so the bound
    dominates the true drift of G0.
    """
    lv = drift_eval if drift_eval is not None else LyapunovDrift(model, cert.weight)
    f0 = coupling_generator_F0(model, ctrl, x, y, exact=exact, **overlap_kw)
    return ctrl.epsilon * f0 + lv(x) + lv(y)


def write_margin_csv(path, rows) -> None:
    """Margin report: columns x, y, lhs, rhs, margin."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "lhs", "rhs", "margin"])
        for x, y, lhs, rhs in rows:
            w.writerow(
                [format(v, ".17g") for v in (x, y, lhs, rhs, rhs - lhs)]
            )
