import os

# use the tests/test.env config fle
# flake8: noqa: E402

os.environ["CONFIG"] = os.path.abspath(
    os.path.join(os.path.dirname(os.path.dirname(__file__)), "tests/test.env")
)

import numpy as np
import pytest

from app import tensor_core as tc
from app.tfnet import TFNetConfig, build


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_params():
    return build(TFNetConfig.tiny(), seed=0)


@pytest.fixture(autouse=True)
def clean_op_counts():
    tc.op_counts.clear()
    yield
    tc.op_counts.clear()
