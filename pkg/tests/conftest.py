"""shared pytest fixtures"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numerics as nx # pylint: disable=wrong-import-position
from timerutil import Timers # pylint: disable=wrong-import-position

@pytest.fixture
def float64():
    """run a test with float64 tensors, restoring the previous precision afterwards"""

    prev = nx.Precision.dtype
    nx.Precision.dtype = np.float64

    try:
        yield np.float64
    finally:
        nx.Precision.dtype = prev

@pytest.fixture(autouse=True)
def clean_timers():
    """timers accumulate per process; start every test from zero"""

    Timers.reset()
    Timers.enabled = True

    yield

    Timers.reset()
