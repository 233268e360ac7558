"""Shared fixtures: the benchmark network and its synthesized bundles are
expensive (several LMI solves), so they are built once per session."""
from __future__ import annotations

import warnings

import numpy as np
import pytest

from tubedmpc.model import DEFAULT_X0, benchmark_msd
from tubedmpc.synth import synthesize

warnings.filterwarnings("ignore", module="cvxpy")

HORIZON = 5


@pytest.fixture(scope="session")
def net():
    return benchmark_msd()


@pytest.fixture(scope="session")
def bundle_global(net):
    return synthesize(net, HORIZON, mode="GLOBAL_K")


@pytest.fixture(scope="session")
def bundle_local(net):
    return synthesize(net, HORIZON, mode="LOCAL_K")


@pytest.fixture(scope="session")
def x0():
    return np.asarray(DEFAULT_X0, dtype=float)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
