import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


class SimCache:
    """Noise-free simulations shared across tests; each seed is generated once."""

    def __init__(self):
        self._sims = {}

    def get(self, seed, frames=10):
        from bevterrain import synth

        key = (seed, frames)
        if key not in self._sims:
            self._sims[key] = synth.simulate_clean(seed=seed, frames=frames)
        return self._sims[key]


@pytest.fixture(scope="session")
def sims():
    return SimCache()
