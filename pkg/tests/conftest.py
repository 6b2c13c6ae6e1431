import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from learning.gp_dynamics import Dataset, GpHyper, GpModel  # noqa: E402
from learning.rollout import make_context  # noqa: E402
from plant.driveline import build_state_space, calibrated_params, discretize  # noqa: E402
from plant.reference import FeedforwardParams, gear1_initial_state, reference_with_command  # noqa: E402
from policy.controller import GearshiftController, PolicyParams, lqr_init  # noqa: E402
from settings import (BenchConfig, CostConfig, DrivelineConstants, ReferenceConfig,  # noqa: E402
                      RolloutConfig, Settings)


@pytest.fixture(scope="session")
def settings():
    return Settings()


@pytest.fixture(scope="session")
def params():
    return calibrated_params(DrivelineConstants())


@pytest.fixture(scope="session")
def dss(params):
    return discretize(build_state_space(params), ReferenceConfig().dt)


@pytest.fixture(scope="session")
def ref(params):
    return reference_with_command(params, ReferenceConfig())


@pytest.fixture(scope="session")
def x0(params):
    return gear1_initial_state(params, ReferenceConfig())


@pytest.fixture(scope="session")
def ideal_bench():
    return BenchConfig.ideal()


@pytest.fixture(scope="session")
def lqr_gain(dss):
    return lqr_init(dss, np.diag([1.0, 1.0, 50.0, 50.0]), np.diag([0.1, 0.1]))


@pytest.fixture(scope="session")
def policy(lqr_gain):
    return PolicyParams(ff=FeedforwardParams(), kc=lqr_gain)


@pytest.fixture(scope="session")
def controller(policy, ref):
    return GearshiftController(policy, ref)


@pytest.fixture(scope="session")
def synthetic_gp(ref):
    """Small GP whose inputs surround the reference states and nominal command"""
    rng = np.random.default_rng(7)
    n = 40
    centre = np.concatenate([ref.xbar[:, :], ref.ubar0], axis=1)
    rows = centre[rng.integers(0, len(centre), size=n)]
    spread = np.array([0.3, 0.3, 0.3, 0.002, 0.3, 0.3, 0.3])
    z = rows + rng.normal(0.0, 1.0, size=rows.shape) * spread
    y = np.column_stack([
        0.02 * np.sin(z[:, 0] / 3.0) + 0.01 * z[:, 4],
        0.01 * np.cos(z[:, 1]) - 0.005 * z[:, 6],
        0.003 * np.tanh(z[:, 2] - z[:, 1]),
        1e-4 * np.sin(z[:, 3] * 300.0),
    ])
    hypers = [GpHyper.from_values(spread * 4.0, float(np.var(y[:, d])) + 1e-8, 1e-6) for d in range(4)]
    return GpModel(Dataset(z=z, y=y), hypers)


@pytest.fixture(scope="session")
def disabled_context(dss, ref):
    return make_context(dss, ref, GpModel.disabled(), CostConfig(), RolloutConfig())


@pytest.fixture(scope="session")
def gp_context(dss, ref, synthetic_gp):
    return make_context(dss, ref, synthetic_gp, CostConfig(), RolloutConfig())
