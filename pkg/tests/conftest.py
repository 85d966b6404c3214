from pathlib import Path

import hypothesis
import numpy as np
import pytest

from cpdvmc.hamiltonians import AbInitioHamiltonian, parse_fcidump

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=300, deadline=None)
hypothesis.settings.load_profile("default")

DATA = Path(__file__).parent / "data"


def random_abinitio(L, seed=0, scale=0.3, e_core=0.0, nelec=None, ms2=0):
    """Random real integrals with full 8-fold symmetry and a positive on-site part."""
    rng = np.random.default_rng(seed)
    h1 = rng.normal(size=(L, L))
    h1 = 0.5 * (h1 + h1.T)
    A = rng.normal(size=(L, L, L, L))
    h2 = A + A.transpose(1, 0, 2, 3)
    h2 = h2 + h2.transpose(0, 1, 3, 2)
    h2 = h2 + h2.transpose(2, 3, 0, 1)
    h2 = scale * h2 / 8 + np.einsum("ij,kl->ijkl", np.eye(L), np.eye(L))
    return AbInitioHamiltonian(h1, h2, e_core, nelec, ms2)


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def h4():
    return parse_fcidump(DATA / "h4_chain.fcidump")


@pytest.fixture(scope="session")
def h6():
    return parse_fcidump(DATA / "h6_chain.fcidump")


@pytest.fixture(scope="session")
def h2_far():
    return parse_fcidump(DATA / "h2_dissociated.fcidump")
