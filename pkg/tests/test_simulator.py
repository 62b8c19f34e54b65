import math

import numpy as np
import pytest

from cbic.generator import SmoothFunction, apply_generator
from cbic.mechanisms import (
    BranchingMechanism,
    CompetitionMechanism,
    ImmigrationMechanism,
    LevyMeasure,
    MechanismError,
    ModelSpec,
    phi_eval,
    psi_eval,
    stable_to_generic,
)
from cbic.simulator import (
    GAP_TOL,
    SimConfig,
    SimulationError,
    cbi_laplace,
    mean_with_dt_refinement,
    read_path_dump,
    resolve_eps,
    sample_stable_increment,
    simulate_coupled,
    simulate_coupled_ensemble,
    simulate_ensemble,
    simulate_path,
    solve_vt,
    write_ensemble_csv,
    write_path_dump,
)


class TestSolveVt:
    def test_initial_condition(self):
        mech = BranchingMechanism(0.7, 0.2, LevyMeasure.uniform(1.0, 0.0, 1.0))
        assert solve_vt(mech, 1.3, 0.0) == 1.3

    @pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("t", [0.25, 1.0, 5.0])
    def test_linear_flow(self, lam, t):
        # Psi = b lam: v_t = lam e^{-b t}
        mech = BranchingMechanism(0.7, 0.0)
        assert solve_vt(mech, lam, t) == pytest.approx(lam * math.exp(-0.7 * t), rel=1e-9)

    @pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("t", [0.25, 1.0, 5.0])
    def test_quadratic_flow(self, lam, t):
        # Psi = c lam^2: v_t = lam / (1 + c lam t)
        mech = BranchingMechanism(0.0, 0.4)
        assert solve_vt(mech, lam, t) == pytest.approx(lam / (1.0 + 0.4 * lam * t), rel=1e-9)

    def test_positive_argument_required(self):
        with pytest.raises(MechanismError):
            solve_vt(BranchingMechanism(0.5, 0.0), 0.0, 1.0)


class TestCbiLaplace:
    def test_time_zero(self):
        mech = BranchingMechanism(0.7, 0.0)
        imm = ImmigrationMechanism(0.6)
        assert cbi_laplace(mech, imm, 1.5, 2.0, 0.0) == pytest.approx(math.exp(-3.0))

    def test_no_immigration_reduction(self):
        mech = BranchingMechanism(0.7, 0.1)
        imm = ImmigrationMechanism(0.0)
        lam, t, x = 1.2, 0.7, 2.0
        want = math.exp(-x * solve_vt(mech, lam, t))
        assert cbi_laplace(mech, imm, x, lam, t) == pytest.approx(want, rel=1e-9)

    def test_linear_closed_form(self):
        b, beta, x, lam, t = 0.7, 0.6, 1.5, 1.0, 0.8
        got = cbi_laplace(BranchingMechanism(b, 0.0), ImmigrationMechanism(beta), x, lam, t)
        want = math.exp(
            -x * lam * math.exp(-b * t) - beta * lam * (1.0 - math.exp(-b * t)) / b
        )
        assert got == pytest.approx(want, rel=1e-9)


class TestStableIncrements:
    def test_subordinator_nonnegative(self):
        rng = np.random.default_rng(0)
        inc = sample_stable_increment(0.5, 0.02, rng, size=5000)
        assert (inc >= 0.0).all()

    @pytest.mark.parametrize("alpha,sign", [(0.5, -1.0), (1.0, None), (1.5, 1.0)])
    def test_laplace_transform_monte_carlo(self, alpha, sign):
        rng = np.random.default_rng(42)
        dt = 0.2
        inc = sample_stable_increment(alpha, dt, rng, size=400_000)
        for lam in (0.5, 1.0, 2.0):
            vals = np.exp(-lam * inc)
            emp = vals.mean()
            se = vals.std(ddof=1) / math.sqrt(vals.size)
            if alpha == 1.0:
                target = math.exp(dt * (lam * math.log(lam) + (np.euler_gamma - 1.0) * lam))
            else:
                target = math.exp(sign * dt * lam**alpha)
            assert abs(emp - target) <= 3.0 * se + 1e-4

    def test_index_range_enforced(self):
        rng = np.random.default_rng(0)
        with pytest.raises(MechanismError):
            sample_stable_increment(2.0, 0.1, rng)

    def test_stream_determinism(self):
        a = sample_stable_increment(1.5, 0.1, np.random.default_rng(7), size=10)
        b = sample_stable_increment(1.5, 0.1, np.random.default_rng(7), size=10)
        assert np.array_equal(a, b)


def banded_model(b=0.5, c=0.0, rate=2.0, beta=0.3):
    return ModelSpec(
        BranchingMechanism(b, c, LevyMeasure.uniform(rate, 0.0, 1.0)),
        ImmigrationMechanism(beta),
        CompetitionMechanism.none(),
    )


class TestSimulatePath:
    def test_zero_is_absorbing_without_immigration(self):
        model = ModelSpec(
            BranchingMechanism(0.5, 0.3, LevyMeasure.uniform(1.0, 0.0, 1.0)),
            ImmigrationMechanism(0.0),
            CompetitionMechanism.none(),
        )
        p = simulate_path(model, 0.0, SimConfig(dt=1e-3, t_end=1.0, seed=3))
        assert np.all(p.values == 0.0)
        assert not p.exploded

    def test_nonnegative_paths(self):
        model = banded_model(b=2.0, c=0.5)
        res = simulate_ensemble(model, 0.5, SimConfig(dt=1e-3, t_end=1.0, seed=5, n_paths=256))
        finite = res.values[np.isfinite(res.values)]
        assert (finite >= 0.0).all()

    def test_bit_identical_reruns(self):
        model = banded_model(c=0.2)
        cfg = SimConfig(dt=1e-3, t_end=0.5, seed=11, n_paths=2000)
        a = simulate_ensemble(model, 1.0, cfg, record_times=[0.25, 0.5])
        b = simulate_ensemble(model, 1.0, cfg, record_times=[0.25, 0.5])
        assert np.array_equal(a.values, b.values)

    def test_explosive_stable_flags_explosion(self):
        # index 1/2 subordinator branching is non-conservative; cap low to see it
        model = ModelSpec(
            stable_to_generic(0.0, 0.0, 1.0, 0.5),
            ImmigrationMechanism(0.0),
            CompetitionMechanism.none(),
        )
        cfg = SimConfig(dt=1e-3, t_end=4.0, seed=2, x_max=500.0, n_paths=64)
        res = simulate_ensemble(model, 5.0, cfg, record_times=[4.0])
        assert res.exploded.any()
        p = simulate_path(model, 5.0, SimConfig(dt=1e-3, t_end=4.0, seed=6, x_max=500.0))
        if p.exploded:
            k = np.argmax(~np.isfinite(p.values))
            assert np.all(~np.isfinite(p.values[k:]))  # frozen at the sentinel
            assert p.explosion_time == pytest.approx(p.times[k])

    def test_cb_ensemble_mean_tracks_first_moment(self):
        model = ModelSpec(
            BranchingMechanism(1.0, 0.25, LevyMeasure.uniform(2.0, 0.0, 1.0)),
            ImmigrationMechanism(0.0),
            CompetitionMechanism.none(),
        )
        cfg = SimConfig(dt=1e-3, t_end=1.0, seed=11, n_paths=4000)
        res = simulate_ensemble(model, 2.0, cfg, record_times=[1.0])
        vals = res.values[-1]
        vals = vals[np.isfinite(vals)]
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert vals.mean() == pytest.approx(2.0 * math.exp(-1.0), abs=3.0 * se)

    def test_martingale_residual_for_bounded_test_function(self):
        # f = e^{-x}: Lf(x) = e^{-x}(x Psi(1) + g(x) - Phi(1))
        model = banded_model(b=0.5, c=0.2, rate=1.0, beta=0.3)
        psi1 = psi_eval(model.branching, 1.0)
        phi1 = phi_eval(model.immigration, 1.0)
        cfg = SimConfig(dt=1e-3, t_end=1.0, seed=23, n_paths=4000)
        grid = np.linspace(0.0, 1.0, 51)
        res = simulate_ensemble(model, 1.5, cfg, record_times=grid)
        f = np.exp(-res.values)
        lf = np.exp(-res.values) * (res.values * psi1 - phi1)
        integral = np.trapezoid(lf, res.times, axis=0)
        resid = f[-1] - f[0] - integral
        se = resid.std(ddof=1) / math.sqrt(resid.size)
        assert abs(resid.mean()) <= 3.0 * se + 5.0 * cfg.dt

    @pytest.mark.parametrize("alpha,sigma,a,c", [(0.5, 1.0, 0.3, 0.05), (1.0, 0.7, 0.2, 0.0),
                                                 (1.5, 0.8, 0.4, 0.0)])
    def test_stable_fast_path_law_against_transform_oracle(self, alpha, sigma, a, c):
        # E[e^{-x(t)}] from the fast path must match the flow/quadrature oracle
        br = stable_to_generic(a, c, sigma, alpha)
        imm = ImmigrationMechanism(0.4)
        model = ModelSpec(br, imm, CompetitionMechanism.none())
        x0, lam, t = 0.8, 1.0, 0.5
        oracle = cbi_laplace(br, imm, x0, lam, t)
        cfg = SimConfig(dt=1e-3, t_end=t, seed=5, n_paths=6000, x_max=1e12)
        res = simulate_ensemble(model, x0, cfg, record_times=[t])
        v = res.values[-1]
        emp = np.where(np.isfinite(v), np.exp(-lam * np.where(np.isfinite(v), v, 0.0)), 0.0)
        se = emp.std(ddof=1) / math.sqrt(emp.size)
        assert abs(emp.mean() - oracle) <= 3.5 * se + 2e-3, (emp.mean(), oracle, se)

    def test_resolve_eps_zero_for_finite_activity(self):
        cfg = SimConfig(dt=1e-3)
        assert resolve_eps(LevyMeasure.uniform(2.0, 0.0, 1.0), cfg, 10.0) == 0.0
        eps = resolve_eps(LevyMeasure.stable(1.5, 1.0), cfg, 10.0)
        assert eps > 0.0
        # events-per-step budget holds at the reference scale
        assert LevyMeasure.stable(1.5, 1.0).mass_above(eps) * cfg.dt * 10.0 <= 10.0 * 1.01


class TestSimulateCoupled:
    def test_equal_start_couples_immediately(self, ergodic_v1_model):
        cp = simulate_coupled(ergodic_v1_model, 1.0, 1.0, SimConfig(dt=1e-3, t_end=0.5, seed=9))
        assert cp.coupling_time == 0.0
        assert np.array_equal(cp.x_values, cp.y_values)

    def test_order_and_merge(self, ergodic_v1_model):
        cfg = SimConfig(dt=2e-3, t_end=10.0, seed=4, n_paths=128)
        res = simulate_coupled_ensemble(ergodic_v1_model, 2.0, 0.5, cfg,
                                        record_times=np.arange(0.0, 10.01, 0.1))
        assert np.isfinite(res.coupling_times).any()
        for i, t in enumerate(res.times):
            x, y = res.x_values[i], res.y_values[i]
            ok = np.isfinite(x)
            assert (x[ok] >= y[ok]).all()
            done = ok & (res.coupling_times <= t)
            assert np.array_equal(x[done], y[done])

    def test_lasso_event_structure(self, ergodic_v1_model):
        cfg = SimConfig(dt=2e-3, t_end=10.0, seed=15, n_paths=64)
        res = simulate_coupled_ensemble(
            ergodic_v1_model, 2.0, 0.5, cfg, record_times=[10.0], _record_events=True
        )
        events = res.lasso_events
        assert events, "expected at least one lassoing event"
        for t, sign, gap, dx, dy in events:
            assert gap > 0.0
            if sign == "+":
                # follower jumps the leader's jump plus the whole gap
                assert dy - dx == pytest.approx(gap, rel=1e-12, abs=1e-12)
            else:
                assert dx - dy == pytest.approx(gap, rel=1e-12, abs=1e-12)

    def test_merge_is_exact_equality(self, ergodic_v1_model):
        cp = simulate_coupled(ergodic_v1_model, 2.0, 0.5, SimConfig(dt=2e-3, t_end=12.0, seed=8))
        if math.isfinite(cp.coupling_time):
            k = np.searchsorted(cp.times, cp.coupling_time)
            assert np.array_equal(cp.x_values[k:], cp.y_values[k:])

    def test_requires_ordered_start(self, ergodic_v1_model):
        with pytest.raises(SimulationError):
            simulate_coupled(ergodic_v1_model, 0.5, 2.0, SimConfig())

    def test_follower_marginal_law_quick_ks(self, ergodic_v1_model):
        from scipy.stats import ks_2samp

        cfg = SimConfig(dt=2e-3, t_end=1.0, seed=21, n_paths=4000)
        coupled = simulate_coupled_ensemble(ergodic_v1_model, 2.0, 0.5, cfg, record_times=[1.0])
        single = simulate_ensemble(
            ergodic_v1_model, 0.5, SimConfig(dt=2e-3, t_end=1.0, seed=77, n_paths=4000),
            record_times=[1.0],
        )
        _, pv = ks_2samp(coupled.y_values[-1], single.values[-1])
        assert pv > 0.01

    def test_follower_marginal_with_immigration_jumps(self):
        # exercises the immigration-event disassembly branch (no u-strip)
        from scipy.stats import ks_2samp

        model = ModelSpec(
            BranchingMechanism(0.6, 0.0, LevyMeasure.uniform(1.0, 0.0, 1.0)),
            ImmigrationMechanism(0.2, LevyMeasure.uniform(0.8, 0.0, 0.9)),
            CompetitionMechanism.none(),
        )
        coupled = simulate_coupled_ensemble(
            model, 2.0, 0.5, SimConfig(dt=1e-3, t_end=1.0, seed=51, n_paths=6000),
            record_times=[1.0],
        )
        single = simulate_ensemble(
            model, 0.5, SimConfig(dt=1e-3, t_end=1.0, seed=151, n_paths=6000),
            record_times=[1.0],
        )
        _, pv = ks_2samp(coupled.y_values[-1], single.values[-1])
        assert pv > 0.01

    def test_stable_immigration_truncation_law(self):
        # sub-eps immigration jumps fold their mean into the drift
        br = BranchingMechanism(0.8, 0.1)
        imm = ImmigrationMechanism(0.3, LevyMeasure.stable(0.5, 0.4))
        model = ModelSpec(br, imm, CompetitionMechanism.none())
        oracle = cbi_laplace(br, imm, 1.0, 1.0, 0.5)
        res = simulate_ensemble(
            model, 1.0, SimConfig(dt=1e-3, t_end=0.5, seed=77, n_paths=8000),
            record_times=[0.5],
        )
        v = res.values[-1]
        emp = np.exp(-np.where(np.isfinite(v), v, np.inf))
        se = emp.std(ddof=1) / math.sqrt(emp.size)
        assert abs(emp.mean() - oracle) <= 3.5 * se + 1e-3


class TestOutputs:
    def test_dump_roundtrip(self, tmp_path, ergodic_v1_model):
        cfg = SimConfig(dt=1e-2, t_end=0.2, seed=1, n_paths=17)
        res = simulate_ensemble(ergodic_v1_model, 1.0, cfg, record_times=[0.0, 0.1, 0.2])
        path = tmp_path / "paths.bin"
        write_path_dump(res, path)
        back = read_path_dump(path)
        assert np.array_equal(back.times, res.times)
        assert np.array_equal(back.values, res.values)

    def test_csv_bytes_deterministic(self, tmp_path, ergodic_v1_model):
        cfg = SimConfig(dt=1e-2, t_end=0.3, seed=5, n_paths=64)
        outs = []
        for name in ("a.csv", "b.csv"):
            res = simulate_ensemble(ergodic_v1_model, 1.0, cfg, record_times=[0.1, 0.3])
            write_ensemble_csv(res, tmp_path / name)
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]


class TestDtRefinement:
    def test_diffusion_cbi_close_under_halving(self):
        model = ModelSpec(
            BranchingMechanism(1.0, 0.3),
            ImmigrationMechanism(0.4),
            CompetitionMechanism.none(),
        )
        cfg = SimConfig(dt=2e-3, t_end=1.0, seed=3, n_paths=4000)
        coarse, fine, se = mean_with_dt_refinement(model, 1.5, cfg)
        assert abs(coarse - fine) < se

    def test_rejects_jump_models(self, ergodic_v1_model):
        with pytest.raises(SimulationError):
            mean_with_dt_refinement(ergodic_v1_model, 1.0, SimConfig(n_paths=8))
