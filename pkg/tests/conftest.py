import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spinpair.core import SystemConfig, build_hamiltonian, transition_table

# derandomized so a green run stays green
settings.register_profile(
    "repo",
    derandomize=True,
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def cfg():
    return SystemConfig()


@pytest.fixture(scope="session")
def ham(cfg):
    return build_hamiltonian(cfg)


@pytest.fixture(scope="session")
def table(ham, cfg):
    return transition_table(ham, cfg)


def random_density(rng, rank=4):
    z = rng.normal(size=(4, rank)) + 1j * rng.normal(size=(4, rank))
    m = z @ z.conj().T
    return m / np.trace(m).real


def random_ket(rng):
    z = rng.normal(size=4) + 1j * rng.normal(size=4)
    return z / np.linalg.norm(z)
