import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from spherepack.exponents import channel_limits
from spherepack.probability import Dmc, bsc

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

orders = st.floats(min_value=1e-3, max_value=1.0, allow_nan=False)
open_orders = st.floats(min_value=1e-3, max_value=1.0 - 1e-3, allow_nan=False)
seeds = st.integers(min_value=0, max_value=2**32 - 1)


def dirichlet(rng: np.random.Generator, size: int, zero_rate: float = 0.0) -> np.ndarray:
    p = rng.dirichlet(np.ones(size))
    if zero_rate > 0:
        mask = rng.random(size) < zero_rate
        mask[rng.integers(size)] = False
        p = np.where(mask, 0.0, p)
        p /= p.sum()
    return p


def channel(rng: np.random.Generator, n_in: int, n_out: int, zero_rate: float = 0.0) -> Dmc:
    return Dmc([dirichlet(rng, n_out, zero_rate) for _ in range(n_in)], renormalize=True)


def random_channels(count: int, seed: int = 11, zero_rate: float = 0.25) -> list[Dmc]:
    """Random 3x3 channels with some zeros and a rate window at least 1e-3 wide."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        w = channel(rng, 3, 3, zero_rate)
        lim = channel_limits(w)
        if lim.c1 - lim.c0 > 1e-3:
            out.append(w)
    return out


@pytest.fixture
def bsc01() -> Dmc:
    return bsc(0.1)


@pytest.fixture
def channel_file(tmp_path):
    path = tmp_path / "bsc01.dmc"
    path.write_text("# crossover 0.1\ndmc 2 2\n0.9 0.1\n0.1 0.9\n", encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    verdicts = getattr(acceptance, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
