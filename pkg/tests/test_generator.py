import math

import numpy as np
import pytest
from scipy.integrate import quad

from cbic.generator import (
    CouplingControl,
    GeneratorDomainError,
    LyapunovCertificate,
    LyapunovFailure,
    SmoothFunction,
    WeightFunction,
    apply_generator,
    coupling_generator_F0,
    coupling_generator_G0,
    lyapunov_certify,
    lyapunov_margin,
)
from cbic.mechanisms import (
    BranchingMechanism,
    CompetitionMechanism,
    ImmigrationMechanism,
    LevyMeasure,
    ModelSpec,
    psi_eval,
    stable_to_generic,
)
from cbic import quadrature

V1 = WeightFunction.v1()
VLOG = WeightFunction.vlog()


def mixed_model():
    """Diffusion + banded density branching, atom immigration, linear competition."""
    return ModelSpec(
        BranchingMechanism(0.4, 0.3, LevyMeasure.uniform(1.5, 0.0, 1.0)),
        ImmigrationMechanism(0.6, LevyMeasure.from_atoms([(0.5, 0.8)])),
        CompetitionMechanism.linear(0.2),
    )


class TestApplyGenerator:
    @pytest.mark.parametrize("x", [0.0, 0.1, 1.0, 10.0, 100.0])
    def test_linear_weight_closed_form(self, x):
        m = mixed_model()
        closed = (
            m.beta
            - m.b * x
            - float(m.g(x))
            + x * m.mu.linear_tail()
            + sum(mass * loc for loc, mass in m.nu.atoms())
        )
        assert apply_generator(m, V1, x) == pytest.approx(closed, rel=1e-6, abs=1e-9)

    @pytest.mark.parametrize("x", [0.0, 0.1, 1.0, 10.0, 100.0])
    def test_log_weight_closed_form(self, x):
        m = mixed_model()
        w = 1.0 + x
        mu_int, _ = quad(
            lambda z: (math.log1p(z / w) - z / w * (z <= 1.0)) * 1.5,
            0.0,
            1.0,
            epsabs=1e-13,
        )
        nu_int = sum(mass * math.log1p(loc / w) for loc, mass in m.nu.atoms())
        closed = (
            -m.c * x / w**2 + x * mu_int + (m.beta - m.b * x - float(m.g(x))) / w + nu_int
        )
        assert apply_generator(m, VLOG, x) == pytest.approx(closed, rel=1e-6, abs=1e-9)

    @pytest.mark.parametrize("x", [0.0, 0.5, 2.0, 25.0])
    def test_neveu_xlog_closed_form(self, x, neveu_xlog_model):
        m = neveu_xlog_model
        sigma, beta = 1.3, 0.7
        want = (
            sigma * x * (1.0 + math.log1p(x)) / (1.0 + x)
            - float(m.g(x)) / (1.0 + x)
            + beta / (1.0 + x)
        )
        assert apply_generator(m, VLOG, x) == pytest.approx(want, rel=1e-8, abs=1e-10)

    def test_neveu_xlog_at_zero_is_beta(self, neveu_xlog_model):
        assert apply_generator(neveu_xlog_model, VLOG, 0.0) == pytest.approx(0.7)

    @pytest.mark.parametrize("lam", [0.5, 1.5])
    @pytest.mark.parametrize("x", [0.3, 2.0, 7.0])
    def test_exponential_eigenrelation(self, lam, x):
        # with no immigration and no competition, L e^{-lam x} = x Psi(lam) e^{-lam x}
        mech = BranchingMechanism(0.4, 0.3, LevyMeasure.uniform(1.5, 0.0, 1.0))
        model = ModelSpec(mech, ImmigrationMechanism(0.0), CompetitionMechanism.none())
        f = SmoothFunction(
            value=lambda u: math.exp(-lam * u),
            deriv=lambda u: -lam * math.exp(-lam * u),
            second=lambda u: lam * lam * math.exp(-lam * u),
        )
        want = x * psi_eval(mech, lam) * math.exp(-lam * x)
        assert apply_generator(model, f, x) == pytest.approx(want, rel=1e-6, abs=1e-12)

    def test_linear_weight_requires_first_moment_tail(self):
        model = ModelSpec(
            stable_to_generic(0.0, 0.0, 1.0, 0.8),
            ImmigrationMechanism(0.1),
            CompetitionMechanism.none(),
        )
        with pytest.raises(GeneratorDomainError, match="z mu"):
            apply_generator(model, V1, 1.0)


class TestIdentities:
    @pytest.mark.parametrize("alpha", [0.3, 0.7])
    @pytest.mark.parametrize("x", [0.0, 1.0, 10.0])
    def test_log_moment_closed_form(self, alpha, x):
        # int_0^inf log(1 + z/(1+x)) z^(-1-alpha) dz = pi / (alpha sin(alpha pi) (1+x)^alpha)
        w = 1.0 + x
        val = quadrature.integrate(
            lambda z: math.log1p(z / w) * z ** (-1.0 - alpha), 0.0, math.inf
        )
        want = math.pi / (alpha * math.sin(alpha * math.pi) * w**alpha)
        assert val == pytest.approx(want, rel=1e-6)

    @pytest.mark.parametrize(
        "mu", [LevyMeasure.uniform(2.0, 0.0, 1.0), LevyMeasure.stable(1.5, 1.0)]
    )
    def test_small_jump_log_compensation_vanishes(self, mu):
        # (x/log x) int_0^1 [log(1 + z/(1+x)) - z/(1+x)] mu(dz) -> 0
        seq = []
        for x in (1e2, 1e3, 1e4):
            val = mu.integrate(
                lambda z: math.log1p(z / (1.0 + x)) - z / (1.0 + x), 0.0, 1.0
            )
            seq.append(abs(x / math.log(x) * val))
        assert seq[0] > seq[1] > seq[2]


class TestLyapunovCertify:
    def test_linear_competition_certifies_v1(self):
        # g(x) = a x with a + drift margin > 0
        model = ModelSpec(
            BranchingMechanism(-0.2, 0.1, LevyMeasure.uniform(1.0, 0.0, 1.0)),
            ImmigrationMechanism(0.4),
            CompetitionMechanism.linear(0.7),
        )
        cert = lyapunov_certify(model, V1)
        assert isinstance(cert, LyapunovCertificate)
        assert cert.c0 > 0 and cert.c1 > 0
        assert (cert.grid_margin <= 1e-12).all()

    def test_ergodic_v1_constants(self, ergodic_v1_model):
        cert = lyapunov_certify(ergodic_v1_model, V1)
        assert isinstance(cert, LyapunovCertificate)
        # drift is beta - b x exactly: the sweep tops out at C1 = b, C0 = beta
        assert cert.c1 == pytest.approx(0.5)
        assert cert.c0 == pytest.approx(0.3, rel=1e-6)

    def test_power_competition_certifies_vlog(self, stable_power_model):
        cert = lyapunov_certify(stable_power_model, VLOG)
        assert isinstance(cert, LyapunovCertificate)
        assert lyapunov_margin(stable_power_model, VLOG) > 0

    def test_critical_cbi_fails_with_zero_margin(self, critical_cbi_model):
        res = lyapunov_certify(critical_cbi_model, V1)
        assert isinstance(res, LyapunovFailure)
        assert res.margin == pytest.approx(0.0, abs=1e-12)
        assert res.margin >= 0.0

    def test_neveu_xlog_fails_with_positive_floor(self, neveu_xlog_model):
        res = lyapunov_certify(neveu_xlog_model, VLOG)
        assert isinstance(res, LyapunovFailure)
        # LV stays above a positive constant: min(sigma, beta) here
        assert res.lv_grid_min >= 0.5 * min(1.3, 0.7)
        assert "positive constant" in res.reason


def _control(theta=6.0, lambda0=0.8, x0=0.25, l=2.0, psi0=0.5, eps=1.0):
    return CouplingControl(
        lambda0=lambda0, x0=x0, theta=theta, epsilon=eps, l=l, psi_at_lambda0=psi0
    )


class TestCouplingControl:
    def test_envelope_bounds(self):
        ctrl = _control()
        rng = np.random.default_rng(1)
        for _ in range(1000):
            x = rng.uniform(0.0, 10.0)
            y = rng.uniform(0.0, x) if x > 0 else 0.0
            if x == y:
                continue
            f0 = ctrl.F0(x, y)
            assert ctrl.theta <= f0 <= 2.0 * (1.0 + ctrl.theta)

    def test_diagonal_vanishes(self):
        ctrl = _control()
        for z in (0.0, 0.4, 3.0):
            assert ctrl.F0(z, z) == 0.0
            assert ctrl.G0(V1, z, z) == 0.0

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            _control(theta=2.0)
        with pytest.raises(ValueError):
            _control(x0=1.5)
        with pytest.raises(ValueError):
            _control(psi0=-0.1)


class TestCouplingGeneratorF0:
    def test_pure_diffusion_exact_matches_hand_expansion(self):
        model = ModelSpec(
            BranchingMechanism(0.0, 0.7),
            ImmigrationMechanism(0.0),
            CompetitionMechanism.none(),
        )
        ctrl = _control(psi0=psi_eval(model.branching, 0.8))
        lam0, c = ctrl.lambda0, model.c
        for x, y in ((0.5, 0.2), (0.1, 0.0), (2.0, 1.0)):
            got = coupling_generator_F0(model, ctrl, x, y, exact=True)
            g = x - y
            psig = -math.expm1(-lam0 * g)
            psip = lam0 * math.exp(-lam0 * g)
            psipp = -lam0 * psip
            phix, php, phpp = ctrl.phi(x), ctrl.phi_prime(x), ctrl.phi_second(x)
            want = c * (
                x * (phpp * (1 + psig) + 2 * php * psip + phix * psipp)
                + 3 * y * phix * psipp
                + 2 * y * php * psip
            )
            assert got == pytest.approx(want, rel=1e-9, abs=1e-12)

    def test_exact_below_bound_on_grid(self, ergodic_v1_model):
        models = [
            ergodic_v1_model,
            ModelSpec(  # nu-bearing variant hits the immigration sweep term
                ergodic_v1_model.branching,
                ImmigrationMechanism(0.2, LevyMeasure.uniform(0.8, 0.0, 0.9)),
                ergodic_v1_model.competition,
            ),
        ]
        for model in models:
            ctrl = _control(psi0=psi_eval(model.branching, 0.8))
            for x in (0.05, 0.2, 0.7, 2.0, 9.0):
                for gap in (0.01, 0.15, 0.8, 1.9):
                    if gap > x:
                        continue
                    y = x - gap
                    ub = coupling_generator_F0(model, ctrl, x, y)
                    exact = coupling_generator_F0(model, ctrl, x, y, exact=True)
                    assert exact <= ub + 1e-6 * abs(ub) + 1e-9

    def test_nonpositive_beyond_l_away_from_origin(self, ergodic_v1_model):
        ctrl = _control(psi0=psi_eval(ergodic_v1_model.branching, 0.8))
        for x, y in ((3.0, 0.5), (10.0, 2.0), (5.0, 0.0)):
            assert x - y > ctrl.l and x > ctrl.x0
            assert coupling_generator_F0(ergodic_v1_model, ctrl, x, y) <= 0.0
            assert coupling_generator_F0(ergodic_v1_model, ctrl, x, y, exact=True) <= 1e-10

    def test_requires_ordered_pair(self, ergodic_v1_model):
        ctrl = _control(psi0=0.5)
        with pytest.raises(ValueError):
            coupling_generator_F0(ergodic_v1_model, ctrl, 1.0, 1.0)

    def test_g0_is_eps_f0_plus_drifts(self, ergodic_v1_model):
        ctrl = _control(psi0=psi_eval(ergodic_v1_model.branching, 0.8))
        cert = lyapunov_certify(ergodic_v1_model, V1)
        x, y = 1.2, 0.4
        f0 = coupling_generator_F0(ergodic_v1_model, ctrl, x, y)
        lv = lambda u: 0.3 - 0.5 * u
        got = coupling_generator_G0(ergodic_v1_model, ctrl, cert, x, y)
        assert got == pytest.approx(ctrl.epsilon * f0 + lv(x) + lv(y), rel=1e-9)
