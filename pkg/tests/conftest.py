import sys
from pathlib import Path

import numpy as np
import pytest

from hicyolo import kernels

sys.path.insert(0, str(Path(__file__).parent))

BACKENDS = sorted(kernels.available_backends())
TESTS = Path(__file__).parent
GOLDEN = TESTS / "golden"
FIXTURES = TESTS / "fixtures"


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
