import numpy as np
import pytest

from avit import tensor as T
from avit.backbone import TOY
from avit.data import synth_dataset
from avit.model import ModelConfig, build_model


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def synth32():
    return synth_dataset(48, 32, seed=11)


def toy_model(variant="avit", seed=0, dtype=np.float32):
    return build_model(ModelConfig.variant(variant, TOY), seed, dtype=dtype)
