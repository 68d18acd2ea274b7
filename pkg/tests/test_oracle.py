import numpy as np
import pytest
import scipy.linalg

from conftest import H4_FCI
from qcafqmc.hamio import random_psd_hamiltonian
from qcafqmc.oracle import (SectorBasis, SectorHamiltonian, SectorTooLargeError, dense_propagator, fci_solve,
                            imaginary_time_exact, variational_energy_exact)


def test_h4_fci(h4):
    e, v = fci_solve(h4)
    assert abs(e - H4_FCI) < 1e-8
    assert abs(np.linalg.norm(v) - 1) < 1e-12


def test_matvec_matches_dense(rng):
    ham = random_psd_hamiltonian(5, 2, 3, rng)
    op = SectorHamiltonian(ham)
    h = op.dense
    assert np.allclose(h, h.conj().T)
    v = rng.normal(size=op.dim) + 1j * rng.normal(size=op.dim)
    np.testing.assert_allclose(op.matvec(v), h @ v, atol=1e-12)
    e, vec = fci_solve(ham)
    assert abs(e - np.linalg.eigvalsh(h)[0]) < 1e-10
    assert abs(variational_energy_exact(ham, vec) - e) < 1e-10


def test_imaginary_time_converges(h4):
    e, _ = fci_solve(h4)
    basis = SectorBasis(4, 2, 2)
    psi0 = np.random.default_rng(0).normal(size=basis.dim)
    energies = imaginary_time_exact(h4, psi0, 1.0, 1000)
    assert np.all(np.diff(energies) <= 1e-12)
    assert abs(energies[-1] - e) < 1e-6


def test_dense_propagator(h4):
    p = dense_propagator(h4, 0.05)
    h = SectorHamiltonian(h4).dense
    np.testing.assert_allclose(p, scipy.linalg.expm(-0.05 * h), atol=1e-12)


def test_rotate_vector_onebody(rng):
    basis = SectorBasis(4, 2, 1)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)))
    v = rng.normal(size=basis.dim)
    w = basis.rotate_vector(q, q, v)
    assert abs(np.linalg.norm(w) - np.linalg.norm(v)) < 1e-12


def test_sector_too_large():
    with pytest.raises(SectorTooLargeError):
        SectorBasis(40, 20, 20).dim
