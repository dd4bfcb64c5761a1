from __future__ import annotations

import numpy as np
import pytest

from refuel.envgen import FamilySpec, generate_family, generate_model_classes
from refuel.mdp import RewardTable, TabularLowRankMdp


def random_mdp(rng: np.random.Generator, H=3, S=4, K=2, d=3, s1=0) -> TabularLowRankMdp:
    phi = rng.dirichlet(np.ones(d), size=(H, S, K))
    mu = rng.dirichlet(np.ones(S), size=(H, d)).transpose(0, 2, 1)
    return TabularLowRankMdp(phi, mu, s1)


def random_reward(rng: np.random.Generator, H=3, S=4, K=2) -> RewardTable:
    r = rng.random((H, S, K))
    return RewardTable(r / (H * r.max()))


@pytest.fixture(scope="session")
def small_spec() -> FamilySpec:
    return FamilySpec(num_states=4, num_actions=2, horizon=3, dim=2, num_tasks=2, seed=11,
                      phi_class_size=3, psi_class_size=4)


@pytest.fixture(scope="session")
def small_family(small_spec):
    return generate_family(small_spec)


@pytest.fixture(scope="session")
def small_classes(small_family, small_spec):
    return generate_model_classes(small_family, small_spec, 5)


@pytest.fixture(scope="session")
def accept_spec() -> FamilySpec:
    return FamilySpec(num_states=6, num_actions=3, horizon=4, dim=2, num_tasks=4, seed=1, xi_target=0.05,
                      phi_class_size=6, psi_class_size=12)


@pytest.fixture(scope="session")
def accept_family(accept_spec):
    return generate_family(accept_spec)


@pytest.fixture(scope="session")
def accept_classes(accept_family, accept_spec):
    return generate_model_classes(accept_family, accept_spec, 1)
