import os

from divbar_sim import DiscreteTest

DATA_DIR = os.path.join(
    os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
    "src",
    "divbar_sim",
    "data",
)


def bernoulli(p: float, h0: float = 1.0) -> DiscreteTest:
    """Per-slot decode with probability p: the whole packet or nothing."""
    return DiscreteTest(((h0, p), (0.0, 1.0 - p)))
