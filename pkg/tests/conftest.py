import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gpchain.data import synth_generate
from gpchain.kernels import KernelSpec
from gpchain.model import init_state

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def perturbed(state, scale=0.3, seed=0):
    """Move a freshly initialized posterior away from its symmetric start."""
    rng = np.random.default_rng(seed)
    post = state.post
    vec = post.to_vector() + scale * rng.standard_normal(post.size)
    return state.with_post(post.from_vector(vec))


def make_desk(seed=0, K=1, M=3):
    """Two sequences of length 2, two labels, three inducing points."""
    data, _ = synth_generate(2, 2, 2, length_range=(2, 2), spec=KernelSpec(), seed=seed)
    state = init_state(data, M, K=K, spec=KernelSpec(), seed=seed)
    return data, perturbed(state, seed=seed)


@pytest.fixture
def desk():
    return make_desk()


@pytest.fixture
def small_data():
    data, latents = synth_generate(3, 4, 12, length_range=(3, 6),
                                   spec=KernelSpec(lengthscales=(2.0,), variance=4.0), seed=3)
    return data, latents


ACCEPTANCE = []


def report(number: int, ok: bool, detail: str) -> None:
    """Record one acceptance line; printed together in the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
