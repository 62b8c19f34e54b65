import math

import pytest

from cbic.mechanisms import (
    BranchingMechanism,
    CompetitionMechanism,
    ImmigrationMechanism,
    LevyMeasure,
    ModelSpec,
    stable_to_generic,
)


@pytest.fixture(scope="session")
def ergodic_v1_model():
    """Subcritical CBI with a banded jump density (no diffusion, no nu)."""
    return ModelSpec(
        BranchingMechanism(0.5, 0.0, LevyMeasure.uniform(1.0, 0.0, 1.0)),
        ImmigrationMechanism(0.3),
        CompetitionMechanism.none(),
    )


@pytest.fixture(scope="session")
def critical_cbi_model():
    """Critical CBI: b exactly cancels the jump mean tail.

    The banded small-jump density keeps the fluctuation condition alive so
    the certificate pipeline fails at the Lyapunov step, not earlier; the
    atom makes the criticality margin exactly zero.
    """
    mu = LevyMeasure.sum_of(
        [LevyMeasure.from_atoms([(2.0, 1.0)]), LevyMeasure.uniform(1.0, 0.0, 1.0)]
    )
    return ModelSpec(
        BranchingMechanism(2.0, 0.0, mu),
        ImmigrationMechanism(0.5),
        CompetitionMechanism.none(),
    )


@pytest.fixture(scope="session")
def neveu_xlog_model():
    """Neveu-type branching with competition growing exactly like x log(1+x)."""
    return ModelSpec(
        BranchingMechanism(0.0, 0.0, LevyMeasure.stable(1.0, 1.3)),
        ImmigrationMechanism(0.7),
        CompetitionMechanism.xlog(1.3),
    )


@pytest.fixture(scope="session")
def stable_power_model():
    """Stable index 1/2 with power competition at twice the threshold."""
    alpha, sigma = 0.5, 1.0
    k2 = 2.0 * sigma * math.pi / (math.gamma(1.0 - alpha) * math.sin(alpha * math.pi))
    return ModelSpec(
        stable_to_generic(1.0, 0.0, sigma, alpha),
        ImmigrationMechanism(0.5),
        CompetitionMechanism.power(k2, 2.0 - alpha),
    )
