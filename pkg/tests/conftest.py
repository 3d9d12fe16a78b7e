import numpy as np
import pytest

from pedseg.phantoms import make_phantom
from pedseg.volume import DEFAULT_REGION_MAPPING, labels_to_regions


@pytest.fixture(scope="session")
def phantom_case():
    vol, lm = make_phantom("fixture_case", shape=(32, 32, 32), seed=12)
    return vol, lm


@pytest.fixture(scope="session")
def phantom_regions(phantom_case):
    _, lm = phantom_case
    return labels_to_regions(lm, DEFAULT_REGION_MAPPING)


def random_mask(rng, shape, density=0.3):
    return rng.random(shape) < density


@pytest.fixture
def rng():
    return np.random.default_rng(20240801)
