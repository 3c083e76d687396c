import numpy as np
import pytest
from hypothesis import settings

from classfield.generators import NeuralCfgHyper, sample_neural_cfg
from classfield.hierarchy import rollout

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def cfg0():
    return sample_neural_cfg(2, 3, NeuralCfgHyper(), 0)


@pytest.fixture(scope="session")
def cfg0_h6(cfg0):
    return rollout(cfg0, np.zeros(2), s=0.5, L=6)
