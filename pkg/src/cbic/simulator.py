"""Path simulation of the branching-immigration-competition jump SDE.

A single path follows an Euler scheme: drift [beta - b x - g(x)] dt, Gaussian
variance 2 c x dt, branching jumps above the truncation level eps thinned at
state-dependent rate x * mu(z > eps) with the (eps, 1] compensator folded
into the drift, immigration jumps at constant rate nu(z > eps) with the
sub-eps mean folded into beta.  Stable branching mechanisms skip thinning and
draw spectrally positive alpha-stable increments directly.

The coupled pair reflects the shared Gaussian component and disassembles
every jump event by an independent uniform into merge / gap-doubling /
shared outcomes with thresholds given by the overlap-measure ratios; jumps
landing in the u-strip (Y, X] move the leader alone.  After the coupling
time the pair moves as one path.

RNG: paths are partitioned into fixed 1024-path blocks; each block derives
four Philox streams (Gaussian, branching jumps, immigration jumps,
disassembly uniforms) from (seed, block); ensembles are bit-identical for a
given (seed, config, model) regardless of how the work is chunked.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from . import quadrature
from .measures import overlap_mass, rn_ratio_many
from .mechanisms import (
    BranchingMechanism,
    ImmigrationMechanism,
    LevyMeasure,
    MechanismError,
    ModelSpec,
    phi_eval,
    psi_eval,
    stable_drift_shift,
)

GAP_TOL = 1e-9
_BLOCK = 1024
_EVENT_BUDGET = 10.0  # expected jump events per step at the reference scale
# a path needing more than this many jump events in one step is treated as
# exploded (its jump intensity alone certifies divergence before x_max)
_LAM_CAP = 1e5


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Discretization, truncation and ensemble controls.

    ``eps`` is the small-jump truncation level; ``None`` resolves it
    automatically (0 for finite-activity measures, else the level keeping the
    expected events per step near the budget at ~10x the initial state).
    ``diffusion_correction`` replaces truncated small-jump variance with a
    matching Gaussian.
    """

    dt: float = 1e-3
    t_end: float = 1.0
    eps: Optional[float] = None
    diffusion_correction: bool = True
    x_max: float = 1e8
    seed: int = 0
    n_paths: int = 1

    def __post_init__(self):
        if self.dt <= 0 or self.t_end < 0:
            raise SimulationError("need dt > 0 and t_end >= 0")
        if self.eps is not None and self.eps < 0:
            raise SimulationError("eps must be >= 0")
        if self.n_paths < 1:
            raise SimulationError("n_paths must be >= 1")


@dataclass
class Path:
    times: np.ndarray
    values: np.ndarray
    exploded: bool = False
    explosion_time: Optional[float] = None


@dataclass
class CoupledPath:
    times: np.ndarray
    x_values: np.ndarray
    y_values: np.ndarray
    coupling_time: float = math.inf
    lasso_events: List[Tuple[float, str, float]] = field(default_factory=list)
    exploded: bool = False


@dataclass
class EnsembleResult:
    times: np.ndarray
    values: np.ndarray  # (n_times, n_paths); inf after explosion
    exploded: np.ndarray  # (n_paths,) bool


@dataclass
class CoupledEnsembleResult:
    times: np.ndarray
    x_values: np.ndarray
    y_values: np.ndarray
    coupling_times: np.ndarray  # inf where not coupled by t_end
    exploded: np.ndarray


# -- stable increments ---------------------------------------------------------


def _kanter_positive_stable(alpha: float, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    # E exp(-lam S) = exp(-lam^alpha), 0 < alpha < 1
    a = (
        np.sin(alpha * u) ** alpha
        * np.sin((1.0 - alpha) * u) ** (1.0 - alpha)
        / np.sin(u)
    ) ** (1.0 / (1.0 - alpha))
    return (a / w) ** ((1.0 - alpha) / alpha)


def _cms_standard(alpha: float, beta_skew: float, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    # S(alpha, beta; 1) with unit scale, alpha != 1
    tb = beta_skew * math.tan(math.pi * alpha / 2.0)
    b0 = math.atan(tb) / alpha
    s0 = (1.0 + tb * tb) ** (1.0 / (2.0 * alpha))
    return (
        s0
        * np.sin(alpha * (u + b0))
        / np.cos(u) ** (1.0 / alpha)
        * (np.cos(u - alpha * (u + b0)) / w) ** ((1.0 - alpha) / alpha)
    )


def sample_stable_increment(alpha: float, dt: float, rng, size: Optional[int] = None):
    """Increment(s) of the spectrally positive alpha-stable driver over dt.

    Normalization: E[exp(-lam * increment)] equals exp(-dt lam^alpha) for
    0 < alpha < 1 (no compensation), exp(+dt lam^alpha) for 1 < alpha < 2
    (full compensation), and exp(dt (lam log lam + (euler_gamma - 1) lam))
    for alpha = 1 (compensation of jumps below 1).
    """
    if not 0.0 < alpha < 2.0:
        raise MechanismError(f"stable index must lie in (0, 2), got {alpha}")
    n = 1 if size is None else int(size)
    if alpha == 1.0:
        u = rng.uniform(-math.pi / 2.0, math.pi / 2.0, n)
        w = rng.exponential(1.0, n)
        x = (2.0 / math.pi) * (
            (math.pi / 2.0 + u) * np.tan(u)
            - np.log((math.pi / 2.0) * w * np.cos(u) / (math.pi / 2.0 + u))
        )
        out = (math.pi / 2.0) * dt * x + dt * (math.log(math.pi * dt / 2.0) + 1.0 - np.euler_gamma)
    elif alpha < 1.0:
        u = rng.uniform(0.0, math.pi, n)
        w = rng.exponential(1.0, n)
        out = dt ** (1.0 / alpha) * _kanter_positive_stable(alpha, u, w)
    else:
        u = rng.uniform(-math.pi / 2.0, math.pi / 2.0, n)
        w = rng.exponential(1.0, n)
        scale = abs(math.cos(math.pi * alpha / 2.0)) ** (1.0 / alpha)
        out = dt ** (1.0 / alpha) * scale * _cms_standard(alpha, 1.0, u, w)
    return float(out[0]) if size is None else out


# -- jump sampling plans -------------------------------------------------------


class _Component:
    """One sampleable piece of a truncated measure: (mass, draw)."""

    __slots__ = ("mass", "draw")

    def __init__(self, mass: float, draw: Callable[[np.ndarray], np.ndarray]):
        self.mass = mass
        self.draw = draw


def _density_component(part: LevyMeasure, eps: float) -> Optional[_Component]:
    lo, hi = part.density_support()
    lo = max(lo, eps)
    if hi <= lo:
        return None
    if part.kind == "stable":
        mass = part.mass_above(lo)
        alpha = part.alpha
        return _Component(mass, lambda u, lo=lo, a=alpha: lo * (1.0 - u) ** (-1.0 / a))
    if np.isfinite(hi):
        zs = np.linspace(lo, hi, 4097)
    else:
        # cap where all but 1e-12 of the truncated mass lives
        total = part.mass_above(lo)
        zcap = hi
        probe = max(lo, 1.0)
        while part.mass_above(probe) > 1e-12 * total:
            probe *= 4.0
            if probe > 1e30:
                break
        zs = np.geomspace(lo, probe, 4097)
    dens = part.density(zs)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(zs))])
    mass = part.mass_above(lo)
    if cdf[-1] <= 0:
        return None
    cdf /= cdf[-1]
    return _Component(mass, lambda u, zs=zs, cdf=cdf: np.interp(u, cdf, zs))


class _MeasureSampler:
    """Inverse-CDF / atom-mixture sampler for a measure truncated at eps."""

    def __init__(self, measure: LevyMeasure, eps: float):
        comps: List[_Component] = []
        parts = measure.parts if measure.kind == "sum" else (measure,)
        for part in parts:
            for loc, m in part.atoms():
                if loc > eps:
                    comps.append(_Component(m, lambda u, loc=loc: np.full_like(u, loc)))
            if part.kind in ("stable", "density"):
                comp = _density_component(part, eps)
                if comp is not None:
                    comps.append(comp)
        self.components = comps
        self.total = sum(c.mass for c in comps)
        self._cum = np.cumsum([c.mass for c in comps])

    def draw(self, u_select: np.ndarray, u_pos: np.ndarray) -> np.ndarray:
        z = np.empty_like(u_pos)
        idx = np.searchsorted(self._cum, u_select * self.total)
        idx = np.minimum(idx, len(self.components) - 1)
        for j, comp in enumerate(self.components):
            mask = idx == j
            if mask.any():
                z[mask] = comp.draw(u_pos[mask])
        return z


def resolve_eps(measure: LevyMeasure, cfg: SimConfig, x_ref: float) -> float:
    """Truncation level: 0 for finite activity, else the events-per-step budget."""
    if cfg.eps is not None:
        return cfg.eps
    if measure.is_zero or np.isfinite(measure.mass_above(0.0)):
        return 0.0
    target = _EVENT_BUDGET / (cfg.dt * max(x_ref, 1e-12))
    lo, hi = 1e-12, 1.0
    while measure.mass_above(hi) > target and hi < 1e6:
        hi *= 2.0
    for _ in range(80):
        mid = math.sqrt(lo * hi)
        if measure.mass_above(mid) > target:
            lo = mid
        else:
            hi = mid
    return hi


class _Plan:
    """Everything the steppers need, precomputed once per run."""

    def __init__(self, model: ModelSpec, cfg: SimConfig, x_ref: float, force_thinning: bool = False):
        self.model = model
        mu, nu = model.mu, model.nu
        self.stable_fast = mu.kind == "stable" and not force_thinning
        self.eps_mu = 0.0 if self.stable_fast else resolve_eps(mu, cfg, max(10.0 * x_ref, 10.0))
        self.eps_nu = (
            cfg.eps
            if cfg.eps is not None
            else (0.0 if (nu.is_zero or np.isfinite(nu.mass_above(0.0))) else resolve_eps(nu, cfg, 1.0))
        )
        if self.stable_fast:
            self.alpha = mu.alpha
            self.sigma = mu.sigma
            # alpha != 1: the raw increment is (un)compensated stable noise and
            # the drift absorbs the z <= 1 compensation shift.  alpha = 1: the
            # increment's exponent and the x log(sigma x) term already carry
            # the full compensation, so the generator drift b applies as is.
            if self.alpha == 1.0:
                self.a_drift = model.b
            else:
                self.a_drift = model.b + self.sigma * stable_drift_shift(self.alpha)
            self.mu_rate = 0.0
            self.mu_sampler = None
            self.mu_comp_lin = 0.0
            self.mu_small_sq = 0.0
        else:
            if not mu.is_zero and not np.isfinite(mu.mass_above(self.eps_mu)):
                raise SimulationError("branching measure needs eps > 0 (infinite activity)")
            self.mu_rate = mu.mass_above(self.eps_mu) if not mu.is_zero else 0.0
            self.mu_sampler = _MeasureSampler(mu, self.eps_mu) if self.mu_rate > 0 else None
            self.mu_comp_lin = mu.moment(1.0, self.eps_mu, 1.0) if self.eps_mu < 1.0 else 0.0
            self.mu_small_sq = mu.moment(2.0, 0.0, self.eps_mu) if self.eps_mu > 0 else 0.0
        if not nu.is_zero and not np.isfinite(nu.mass_above(self.eps_nu)):
            raise SimulationError("immigration measure needs eps > 0 (infinite activity)")
        self.nu_rate = nu.mass_above(self.eps_nu) if not nu.is_zero else 0.0
        self.nu_sampler = _MeasureSampler(nu, self.eps_nu) if self.nu_rate > 0 else None
        self.nu_small_lin = nu.moment(1.0, 0.0, self.eps_nu) if self.eps_nu > 0 else 0.0
        self.beta_eff = model.beta + self.nu_small_lin
        self.diff_corr = cfg.diffusion_correction
        self.x_max = cfg.x_max
        self.g = model.g
        self.c = model.c

    # drift coefficient multiplying -x dt in the generic scheme
    @property
    def b_eff(self) -> float:
        if self.stable_fast:
            return self.a_drift
        return self.model.b + self.mu_comp_lin


class _Streams:
    """Per-block generators: Gaussian, mu jumps, nu jumps, disassembly."""

    def __init__(self, seed: int, block: int):
        root = np.random.SeedSequence(entropy=seed, spawn_key=(block,))
        kids = root.spawn(4)
        self.gauss, self.mu, self.nu, self.dis = (
            np.random.Generator(np.random.Philox(k)) for k in kids
        )


def _block_ranges(n: int):
    return [(a, min(a + _BLOCK, n)) for a in range(0, n, _BLOCK)]


# -- single-path stepping -------------------------------------------------------


def _step_single(x: np.ndarray, plan: _Plan, dt: float, s: _Streams) -> np.ndarray:
    live = np.isfinite(x)
    if plan.mu_rate > 0:
        live &= x * plan.mu_rate * dt <= _LAM_CAP
    x = np.where(live, x, np.inf)
    xl = np.where(live, x, 0.0)
    drift = (plan.beta_eff - plan.b_eff * xl - plan.g(xl)) * dt
    var = 2.0 * plan.c * xl * dt
    if plan.diff_corr and plan.mu_small_sq > 0:
        var = var + xl * plan.mu_small_sq * dt
    xn = xl + drift + np.sqrt(np.maximum(var, 0.0)) * s.gauss.standard_normal(x.size)
    if plan.stable_fast and plan.sigma > 0:
        inc = sample_stable_increment(plan.alpha, dt, s.mu, size=x.size)
        if plan.alpha == 1.0:
            scale = plan.sigma * xl
            logdrift = np.where(
                xl > 0, plan.sigma * xl * np.log(np.maximum(plan.sigma * xl, 1e-300)), 0.0
            )
            xn = xn + scale * inc + logdrift * dt
        else:
            # increments carry the lam^alpha exponent normalization, so the
            # state factor is (sigma x)^(1/alpha): the conditional branching
            # exponent over dt is then exactly dt sigma x lam^alpha
            xn = xn + (plan.sigma * xl) ** (1.0 / plan.alpha) * inc
    elif plan.mu_rate > 0:
        lam = xl * plan.mu_rate * dt
        counts = s.mu.poisson(lam)
        total = int(counts.sum())
        if total:
            z = plan.mu_sampler.draw(s.mu.random(total), s.mu.random(total))
            np.add.at(xn, np.repeat(np.arange(x.size), counts), z)
    if plan.nu_rate > 0:
        counts = s.nu.poisson(plan.nu_rate * dt, size=x.size)
        total = int(counts.sum())
        if total:
            z = plan.nu_sampler.draw(s.nu.random(total), s.nu.random(total))
            np.add.at(xn, np.repeat(np.arange(x.size), counts), z)
    xn = np.maximum(xn, 0.0)
    xn = np.where(live, xn, np.inf)
    xn = np.where(xn > plan.x_max, np.inf, xn)
    return xn


def _record_grid(cfg: SimConfig, record_times):
    n_steps = int(round(cfg.t_end / cfg.dt))
    times = np.arange(n_steps + 1) * cfg.dt
    if record_times is None:
        rec_idx = np.arange(n_steps + 1)
    else:
        rec_idx = np.unique(
            np.clip(np.round(np.asarray(record_times, dtype=float) / cfg.dt), 0, n_steps).astype(int)
        )
    return n_steps, times, rec_idx


def simulate_ensemble(
    model: ModelSpec, x0, cfg: SimConfig, record_times: Optional[Sequence[float]] = None
) -> EnsembleResult:
    """Euler ensemble of the SDE; values recorded at the requested times."""
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (cfg.n_paths,)).copy()
    if (x0 < 0).any():
        raise SimulationError("initial states must be >= 0")
    if (x0 > cfg.x_max).any():
        raise SimulationError("initial states must not exceed x_max")
    plan = _Plan(model, cfg, float(np.max(x0)) if x0.size else 1.0)
    n_steps, times, rec_idx = _record_grid(cfg, record_times)
    rec_set = {int(i): k for k, i in enumerate(rec_idx)}
    out = np.empty((len(rec_idx), cfg.n_paths))
    for lo, hi in _block_ranges(cfg.n_paths):
        s = _Streams(cfg.seed, lo // _BLOCK)
        x = x0[lo:hi].copy()
        if 0 in rec_set:
            out[rec_set[0], lo:hi] = x
        for k in range(1, n_steps + 1):
            x = _step_single(x, plan, cfg.dt, s)
            if k in rec_set:
                out[rec_set[k], lo:hi] = x
    exploded = ~np.isfinite(out[-1])
    return EnsembleResult(times[rec_idx], out, exploded)


def simulate_path(model: ModelSpec, x0: float, cfg: SimConfig) -> Path:
    """One path on the full dt-grid."""
    one = SimConfig(
        dt=cfg.dt, t_end=cfg.t_end, eps=cfg.eps, diffusion_correction=cfg.diffusion_correction,
        x_max=cfg.x_max, seed=cfg.seed, n_paths=1,
    )
    res = simulate_ensemble(model, [x0], one)
    vals = res.values[:, 0]
    exploded = bool(res.exploded[0])
    et = None
    if exploded:
        et = float(res.times[np.argmax(~np.isfinite(vals))])
    return Path(res.times, vals, exploded, et)


# -- coupled stepping -----------------------------------------------------------


class _LassoRates:
    """Sub-eps merge / gap-doubling rates as functions of the gap."""

    def __init__(self, measure: LevyMeasure, eps: float):
        self.zero = measure.is_zero or eps <= 0.0
        self.eps = eps
        if self.zero:
            return
        if measure.kind == "stable":
            self.measure = measure
            self.table = None
        else:
            gaps = np.geomspace(1e-10, 10.0, 97)
            self.table = (
                gaps,
                np.array([overlap_mass(measure, -g, 0.0, eps) for g in gaps]),
                np.array([overlap_mass(measure, g, 0.0, eps) for g in gaps]),
            )

    def up(self, gap: np.ndarray) -> np.ndarray:
        if self.zero:
            return np.zeros_like(gap)
        if self.table is None:
            m = self.measure
            return 0.5 * np.maximum(
                m.sigma
                * _stable_pref(m.alpha)
                * (np.maximum(gap, 1e-300) ** -m.alpha - (gap + self.eps) ** -m.alpha),
                0.0,
            )
        return np.interp(gap, self.table[0], self.table[1])

    def down(self, gap: np.ndarray) -> np.ndarray:
        if self.zero:
            return np.zeros_like(gap)
        if self.table is None:
            m = self.measure
            out = np.zeros_like(gap)
            mask = (gap < self.eps) & (gap > 0.0)
            if mask.any():
                out[mask] = 0.5 * (
                    m.sigma * _stable_pref(m.alpha) * (gap[mask] ** -m.alpha - self.eps**-m.alpha)
                )
            return out
        return np.where(gap < self.eps, np.interp(gap, self.table[0], self.table[2]), 0.0)


def _stable_pref(alpha):
    from .mechanisms import stable_density_prefactor

    return stable_density_prefactor(alpha)


class _CoupledState:
    __slots__ = ("x", "y", "coupled", "t_couple", "events")

    def __init__(self, x0, y0, record_events):
        self.x = x0.copy()
        self.y = y0.copy()
        self.coupled = np.isclose(x0, y0, rtol=0.0, atol=GAP_TOL) | (x0 == y0)
        self.t_couple = np.where(self.coupled, 0.0, np.inf)
        self.y[self.coupled] = self.x[self.coupled]
        self.events: Optional[list] = [] if record_events else None


def _apply_jump_events(state, counts, sampler, has_u, x_start, plan, s, t_now):
    """Disassemble jump events sequentially; returns nothing (in-place)."""
    mu = plan.model.mu if has_u else plan.model.nu
    kmax = int(counts.max()) if counts.size else 0
    for k in range(kmax):
        act = counts > k
        na = int(act.sum())
        if na == 0:
            continue
        src = s.mu if has_u else s.nu
        z = sampler.draw(src.random(na), src.random(na))
        u = src.random(na) * x_start[act] if has_u else None
        v = s.dis.random(na)
        xa = state.x[act]
        ya = state.y[act]
        gap = xa - ya
        if has_u:
            leader_only = u > ya  # u in (Y, X]: leader jumps alone
        else:
            leader_only = np.zeros(na, dtype=bool)
        rho_up = rn_ratio_many(mu, -gap, z)
        rho_dn = rn_ratio_many(mu, gap, z)
        merge = (~leader_only) & (v <= rho_up)
        down = (~leader_only) & (v > rho_up) & (v <= rho_up + rho_dn)
        xa_new = xa + z
        ya_new = ya.copy()
        shared = ~(leader_only | merge | down)
        ya_new[shared] += z[shared]
        ya_new[merge] = xa_new[merge]
        ya_new[down] += z[down] - gap[down]
        if state.events is not None:
            # (time, sign, pre-event gap, leader jump, follower jump)
            for i in np.nonzero(merge & (gap > GAP_TOL))[0]:
                state.events.append(
                    (t_now, "+", float(gap[i]), float(z[i]), float(ya_new[i] - ya[i]))
                )
            for i in np.nonzero(down & (gap > GAP_TOL))[0]:
                state.events.append(
                    (t_now, "-", float(gap[i]), float(z[i]), float(ya_new[i] - ya[i]))
                )
        state.x[act] = xa_new
        state.y[act] = ya_new


def _step_coupled(state: _CoupledState, plan: _Plan, lasso_mu, lasso_nu, dt, s, t_now):
    n = state.x.size
    live = np.isfinite(state.x)
    if plan.mu_rate > 0:
        live &= state.x * plan.mu_rate * dt <= _LAM_CAP
        state.x = np.where(live, state.x, np.inf)
        state.y = np.where(live, state.y, np.inf)
    x = np.where(live, state.x, 0.0)
    y = np.where(live, state.y, 0.0)
    gap0 = x - y
    # Gaussian reflection: X gets G1 + G2, Y gets -G1 before coupling
    n1 = s.gauss.standard_normal(n)
    n2 = s.gauss.standard_normal(n)
    g1 = np.sqrt(np.maximum(2.0 * plan.c * y * dt, 0.0)) * n1
    g2 = np.sqrt(np.maximum(2.0 * plan.c * gap0 * dt, 0.0)) * n2
    if plan.diff_corr and plan.mu_small_sq > 0:
        nc = s.gauss.standard_normal(n)
        nl = s.gauss.standard_normal(n)
        gc = np.sqrt(np.maximum(y * plan.mu_small_sq * dt, 0.0)) * nc
        gl = np.sqrt(np.maximum(gap0 * plan.mu_small_sq * dt, 0.0)) * nl
    else:
        gc = gl = 0.0
    drift_x = (plan.beta_eff - plan.b_eff * x - plan.g(x)) * dt
    drift_y = (plan.beta_eff - plan.b_eff * y - plan.g(y)) * dt
    state.x = x + drift_x + g1 + g2 + gc + gl
    # only the diffusion part is reflected; the truncated-small-jump
    # correction gc stands in for shared jumps and is common to both
    state.y = y + drift_y + np.where(state.coupled, g1, -g1) + gc
    # branching events (thinning at the step-start leader state)
    if plan.mu_rate > 0:
        lam = x * plan.mu_rate * dt
        counts = s.mu.poisson(np.where(live, lam, 0.0))
        _apply_jump_events(state, counts, plan.mu_sampler, True, x, plan, s, t_now)
    # immigration events
    if plan.nu_rate > 0:
        counts = s.nu.poisson(plan.nu_rate * dt, size=n)
        counts = np.where(live, counts, 0)
        _apply_jump_events(state, counts, plan.nu_sampler, False, x, plan, s, t_now)
    # sub-eps lasso corrections (merge / gap doubling carried by small jumps)
    if not (lasso_mu.zero and lasso_nu.zero):
        u_up = s.dis.random(n)
        u_dn = s.dis.random(n)
        z_dn = s.dis.random(n)
        gap = state.x - state.y
        open_mask = live & ~state.coupled & (gap > GAP_TOL)
        rate_up = state.y * lasso_mu.up(np.maximum(gap, 0.0)) + lasso_nu.up(np.maximum(gap, 0.0))
        fire_up = open_mask & (u_up < np.minimum(rate_up * dt, 1.0))
        if fire_up.any():
            if state.events is not None:
                for i in np.nonzero(fire_up)[0]:
                    state.events.append((t_now, "+", float(gap[i]), 0.0, float(gap[i])))
            state.y[fire_up] = state.x[fire_up]
        rate_dn = state.y * lasso_mu.down(np.maximum(gap, 0.0)) + lasso_nu.down(
            np.maximum(gap, 0.0)
        )
        fire_dn = open_mask & ~fire_up & (u_dn < np.minimum(rate_dn * dt, 1.0))
        if fire_dn.any():
            eps_m = max(lasso_mu.eps if not lasso_mu.zero else 0.0,
                        lasso_nu.eps if not lasso_nu.zero else 0.0)
            zz = gap[fire_dn] + (eps_m - gap[fire_dn]) * z_dn[fire_dn]
            if state.events is not None:
                for i_local, i in enumerate(np.nonzero(fire_dn)[0]):
                    state.events.append(
                        (t_now, "-", float(gap[i]), float(zz[i_local]),
                         float(zz[i_local] - gap[i]))
                    )
            state.x[fire_dn] += zz
            state.y[fire_dn] += zz - gap[fire_dn]
    # clamp, merge detection, explosion
    state.x = np.maximum(state.x, 0.0)
    state.y = np.maximum(state.y, 0.0)
    crossed = live & ~state.coupled & (state.y >= state.x - GAP_TOL)
    if crossed.any():
        state.y[crossed] = state.x[crossed]
        state.coupled |= crossed
        state.t_couple[crossed] = t_now + dt
    state.y = np.where(state.coupled, state.x, state.y)
    boom = live & ((state.x > plan.x_max) | (state.y > plan.x_max))
    state.x[boom] = np.inf
    state.y[boom] = np.inf
    state.x[~live] = np.inf
    state.y[~live] = np.inf


def simulate_coupled_ensemble(
    model: ModelSpec,
    x0,
    y0,
    cfg: SimConfig,
    record_times: Optional[Sequence[float]] = None,
    _record_events: bool = False,
) -> CoupledEnsembleResult:
    """Coupled-pair ensemble; leader starts at x0 >= follower y0."""
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (cfg.n_paths,)).copy()
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (cfg.n_paths,)).copy()
    if (y0 < 0).any() or (x0 < y0).any():
        raise SimulationError("coupled start needs x0 >= y0 >= 0")
    # coupling always runs on the thinning representation of the jumps
    plan = _Plan(model, cfg, float(np.max(x0)) if x0.size else 1.0, force_thinning=True)
    n_steps, times, rec_idx = _record_grid(cfg, record_times)
    rec_set = {int(i): k for k, i in enumerate(rec_idx)}
    xs = np.empty((len(rec_idx), cfg.n_paths))
    ys = np.empty((len(rec_idx), cfg.n_paths))
    t_couple = np.empty(cfg.n_paths)
    events: list = []
    lasso_mu = _LassoRates(model.mu, plan.eps_mu)
    lasso_nu = _LassoRates(model.nu, plan.eps_nu)
    for lo, hi in _block_ranges(cfg.n_paths):
        s = _Streams(cfg.seed, lo // _BLOCK)
        st = _CoupledState(x0[lo:hi], y0[lo:hi], _record_events)
        if 0 in rec_set:
            xs[rec_set[0], lo:hi] = st.x
            ys[rec_set[0], lo:hi] = st.y
        for k in range(1, n_steps + 1):
            _step_coupled(st, plan, lasso_mu, lasso_nu, cfg.dt, s, (k - 1) * cfg.dt)
            if k in rec_set:
                xs[rec_set[k], lo:hi] = st.x
                ys[rec_set[k], lo:hi] = st.y
        t_couple[lo:hi] = st.t_couple
        if st.events is not None:
            events.extend(st.events)
    exploded = ~np.isfinite(xs[-1])
    res = CoupledEnsembleResult(times[rec_idx], xs, ys, t_couple, exploded)
    res.lasso_events = events  # type: ignore[attr-defined]
    return res


def simulate_coupled(model: ModelSpec, x0: float, y0: float, cfg: SimConfig) -> CoupledPath:
    """One coupled pair on the full dt-grid with its lassoing-event log."""
    one = SimConfig(
        dt=cfg.dt, t_end=cfg.t_end, eps=cfg.eps, diffusion_correction=cfg.diffusion_correction,
        x_max=cfg.x_max, seed=cfg.seed, n_paths=1,
    )
    res = simulate_coupled_ensemble(model, [x0], [y0], one, _record_events=True)
    return CoupledPath(
        times=res.times,
        x_values=res.x_values[:, 0],
        y_values=res.y_values[:, 0],
        coupling_time=float(res.coupling_times[0]),
        lasso_events=[(t, sign, mag) for t, sign, mag, _dx, _dy in sorted(res.lasso_events)],
        exploded=bool(res.exploded[0]),
    )


# -- transform oracles ----------------------------------------------------------


def solve_vt(mech: BranchingMechanism, lam: float, t: float, dense: bool = False):
    """Backward flow dv/dt = -Psi(v), v_0 = lam, by adaptive Runge-Kutta."""
    if lam <= 0:
        raise MechanismError("solve_vt needs lam > 0")
    if t == 0.0:
        return (lam, None) if dense else lam
    cap = 1e14

    def rhs(_s, v):
        return [-psi_eval(mech, float(min(max(v[0], 0.0), cap)))]

    sol = solve_ivp(
        rhs, (0.0, t), [lam], method="RK45", rtol=1e-11, atol=1e-14, dense_output=True
    )
    if not sol.success:
        raise SimulationError(f"v_t solver failed: {sol.message}")
    vt = float(np.clip(sol.y[0, -1], 1e-300, cap))
    return (vt, sol) if dense else vt


def cbi_laplace(
    branching: BranchingMechanism,
    immigration: ImmigrationMechanism,
    x: float,
    lam: float,
    t: float,
) -> float:
    """E[e^{-lam x(t)}] for the no-competition process started at x."""
    if lam <= 0:
        raise MechanismError("cbi_laplace needs lam > 0")
    if t == 0.0:
        return math.exp(-x * lam)
    vt, sol = solve_vt(branching, lam, t, dense=True)
    accum = quadrature.integrate(
        lambda s: phi_eval(immigration, float(np.clip(sol.sol(s)[0], 0.0, 1e14))), 0.0, t
    )
    return math.exp(-x * vt - accum)


# -- output formats ---------------------------------------------------------------


def write_ensemble_csv(res: EnsembleResult, path) -> None:
    """time, mean, variance, quantiles and explosion fraction per record time.

    Exploded paths are excluded from the moments/quantiles and reported via
    the exploded_frac column.
    """
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)
    with open(path, "w", newline="") as fh:
        fh.write("time,mean,variance," + ",".join(f"q{int(100 * q):02d}" for q in qs) + ",exploded_frac\n")
        for i, t in enumerate(res.times):
            row = res.values[i]
            alive = row[np.isfinite(row)]
            frac = 1.0 - alive.size / row.size
            if alive.size:
                stats = [alive.mean(), alive.var(ddof=1) if alive.size > 1 else 0.0]
                stats += list(np.quantile(alive, qs))
            else:
                stats = [math.nan] * (2 + len(qs))
            cells = [format(t, ".17g")] + [format(v, ".17g") for v in stats] + [format(frac, ".17g")]
            fh.write(",".join(cells) + "\n")


_DUMP_MAGIC = b"CBEN\x01\x00"


def write_path_dump(res: EnsembleResult, path) -> None:
    """Fixed-width little-endian dump: magic, counts, times, row-major values."""
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<QQ", res.times.size, res.values.shape[1]))
        fh.write(np.ascontiguousarray(res.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(res.values, dtype="<f8").tobytes())


def read_path_dump(path) -> EnsembleResult:
    with open(path, "rb") as fh:
        magic = fh.read(len(_DUMP_MAGIC))
        if magic != _DUMP_MAGIC:
            raise SimulationError("not a path dump file")
        nt, npaths = struct.unpack("<QQ", fh.read(16))
        times = np.frombuffer(fh.read(8 * nt), dtype="<f8").copy()
        vals = np.frombuffer(fh.read(8 * nt * npaths), dtype="<f8").reshape(nt, npaths).copy()
    return EnsembleResult(times, vals, ~np.isfinite(vals[-1]))


def mean_with_dt_refinement(model: ModelSpec, x0: float, cfg: SimConfig):
    """Common-random-number mean at t_end for dt and dt/2 (diffusion models).

    The fine grid's Gaussian increments are summed pairwise for the coarse
    run, so the difference isolates the discretization effect.  Jump parts
    are not supported here.
    """
    if not model.mu.is_zero or not model.nu.is_zero:
        raise SimulationError("dt-refinement check supports diffusion-only models")
    n_steps = int(round(cfg.t_end / cfg.dt))
    x_c = np.full(cfg.n_paths, float(x0))
    x_f = np.full(cfg.n_paths, float(x0))
    dt, dt2 = cfg.dt, cfg.dt / 2.0
    for lo, hi in _block_ranges(cfg.n_paths):
        s = _Streams(cfg.seed, lo // _BLOCK)
        xc = x_c[lo:hi]
        xf = x_f[lo:hi]
        for _ in range(n_steps):
            w1 = s.gauss.standard_normal(xc.size) * math.sqrt(dt2)
            w2 = s.gauss.standard_normal(xc.size) * math.sqrt(dt2)
            for w in (w1, w2):
                drift = (model.beta - model.b * xf - model.g(xf)) * dt2
                xf[:] = np.maximum(xf + drift + np.sqrt(2.0 * model.c * xf) * w, 0.0)
            drift = (model.beta - model.b * xc - model.g(xc)) * dt
            xc[:] = np.maximum(xc + drift + np.sqrt(2.0 * model.c * xc) * (w1 + w2), 0.0)
    se = float(np.std(x_c, ddof=1) / math.sqrt(cfg.n_paths))
    return float(x_c.mean()), float(x_f.mean()), se
