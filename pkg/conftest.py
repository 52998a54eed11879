"""Shared fixtures: the three built-in models at small, fast parameters."""
import json

import numpy as np
import pytest

from app.models.experiment import CavityParams, CnotParams, MachineParams
from app.services import model_library
from app.services.quantum_core import DensityOperator


def random_state(rng: np.random.Generator, dim: int, rank: int = None) -> DensityOperator:
    rank = rank or dim
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    m = g @ g.conj().T
    return DensityOperator.from_matrix(m / np.trace(m))


def random_unitary(rng: np.random.Generator, dim: int) -> np.ndarray:
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(g)
    return q * (np.diag(r) / np.abs(np.diag(r)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def cnot_params():
    return CnotParams(alpha=0.8, beta_eps=2.5)


@pytest.fixture
def cnot_process(cnot_params):
    return model_library.build_cnot(cnot_params)


@pytest.fixture
def machine_params():
    return MachineParams(hw1=1.0, hw2=1.5, beta1=6.0, beta2=0.5, beta3=4.0)


@pytest.fixture
def machine(machine_params):
    return model_library.build_machine(machine_params)


@pytest.fixture
def cavity_params():
    # hot, weakly displaced mode that fits in a few dozen Fock levels
    return CavityParams(eps_abs=0.005, gamma0=0.01, beta=2.0, n_max=30)


@pytest.fixture
def cavity(cavity_params):
    return model_library.build_cavity(cavity_params)


@pytest.fixture
def write_config(tmp_path):
    def write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return write
