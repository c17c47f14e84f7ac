import os

import pytest

from divbar_sim import RayleighFading, make_scenario

from helpers import DATA_DIR, bernoulli


@pytest.fixture(scope="session")
def default10_path() -> str:
    return os.path.join(DATA_DIR, "default10.json")


@pytest.fixture(scope="session")
def twonode_path() -> str:
    return os.path.join(DATA_DIR, "twonode.json")


@pytest.fixture
def bernoulli_pair_scenario():
    """One transmitter, two Bernoulli(0.5) receivers that are also sinks."""
    return make_scenario(
        links={(0, 1): bernoulli(0.5), (0, 2): bernoulli(0.5)},
        arrivals={(0, 1): 0.2},
        h0=1.0,
        seed=11,
        slots=5000,
    )


@pytest.fixture
def rayleigh_pair_scenario():
    return make_scenario(
        links={(0, 1): RayleighFading(1.0), (0, 2): RayleighFading(1.0)},
        arrivals={(0, 1): 0.2},
        h0=1.0,
        seed=12,
        slots=5000,
    )


@pytest.fixture
def line3_scenario():
    """0 -> 1 -> 2 relay line with weak links (multi-slot epochs)."""
    return make_scenario(
        links={(0, 1): RayleighFading(1.0), (1, 2): RayleighFading(1.0)},
        arrivals={(0, 2): 0.05},
        h0=3.0,
        seed=13,
        slots=4000,
    )


@pytest.fixture
def mesh_scenario():
    """Small mesh with relays and two commodities; exercises contested
    forwarding, retains, and cross traffic."""
    return make_scenario(
        links={
            (0, 1): RayleighFading(2.0),
            (0, 2): RayleighFading(1.5),
            (1, 3): RayleighFading(2.5),
            (2, 3): RayleighFading(1.2),
            (1, 2): RayleighFading(1.0),
            (2, 1): RayleighFading(1.0),
        },
        arrivals={(0, 3): 0.25, (1, 2): 0.1},
        h0=2.0,
        seed=21,
        slots=6000,
    )
