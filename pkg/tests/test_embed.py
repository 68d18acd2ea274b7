import numpy as np
import pytest

from qcafqmc import embed as E
from qcafqmc import trial as T
from qcafqmc.hamio import random_psd_hamiltonian
from qcafqmc.oracle import SectorBasis, SectorHamiltonian
from qcafqmc.slater import SlaterDeterminant, string_minors

PART = E.SpacePartition(active=(1, 2, 4, 5), core=(3,), virtual=(0,))


def test_projection_identity(rng):
    core = SlaterDeterminant(np.array([[0.6 + 0.8j]]), np.array([[1.0]]))
    ba = SectorBasis(4, 2, 2)
    for _ in range(30):
        phi = SlaterDeterminant.random(6, 3, 3, rng)
        v = rng.normal(size=ba.dim) + 1j * rng.normal(size=ba.dim)
        tr = T.MultiDet(amplitudes=T.AmplitudeMap(4, 2, 2, v))
        bf, vf = E.embed_vector(v, ba, core, PART)
        lhs = E.full_space_overlap(vf, bf, phi)
        assert abs(lhs - E.embedded_overlap(tr, phi, core, PART)) < 1e-12 * max(1, abs(lhs))


def test_no_core_is_plain_overlap(rng):
    part = E.SpacePartition(active=(0, 1, 2, 3))
    v = rng.normal(size=36)
    tr = T.MultiDet(amplitudes=T.AmplitudeMap(4, 2, 2, v))
    phi = SlaterDeterminant.random(4, 2, 2, rng)
    c, _ = E.project_determinant(phi, E.core_determinant(part), part)
    assert c == 1
    assert abs(E.embedded_overlap(tr, phi, E.core_determinant(part), part) - T.trial_overlap(tr, phi)) < 1e-12


def test_embedded_local_energy(rng):
    core = E.core_determinant(PART)
    v = rng.normal(size=36) + 1j * rng.normal(size=36)
    tr = T.MultiDet(amplitudes=T.AmplitudeMap(4, 2, 2, v))
    bf, vf = E.embed_vector(v, SectorBasis(4, 2, 2), core, PART)
    ham = random_psd_hamiltonian(6, 3, 3, rng)
    phi = SlaterDeterminant.random(6, 3, 3, rng)
    el = E.embedded_local_energy(tr, ham, phi, core, PART)
    c = np.outer(string_minors(phi.up, bf.strings_alpha), string_minors(phi.dn, bf.strings_beta)).reshape(-1)
    ref = np.vdot(SectorHamiltonian(ham, bf).matvec(vf), c) / np.vdot(vf, c)
    assert abs(el - ref) < 1e-10


def test_core_annihilated_walker(rng):
    tr = T.MultiDet(amplitudes=T.AmplitudeMap(4, 2, 2, rng.normal(size=36)))
    # up block leaves the core orbital 3 empty
    phi = SlaterDeterminant(np.eye(6)[:, [0, 1, 2]], np.eye(6)[:, [1, 2, 3]])
    assert E.embedded_overlap(tr, phi, E.core_determinant(PART), PART) == 0


def test_partition_validation():
    with pytest.raises(ValueError):
        E.SpacePartition(active=(0, 1), core=(1,))
    with pytest.raises(ValueError):
        E.SpacePartition(active=(0, 2))
    with pytest.raises(ValueError):
        PART.validate(5)


def test_gauge_covariance(rng):
    # right-multiplying walker blocks by M, N scales the full-space overlap by det(M) det(N);
    # phi~ keeps its span and only the product constant * active overlap is gauge-invariant
    core = E.core_determinant(PART)
    phi = SlaterDeterminant.random(6, 3, 3, rng)
    m = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    n = rng.normal(size=(3, 3))
    psi = SlaterDeterminant(phi.up @ m, phi.dn @ n)
    _, a = E.project_determinant(phi, core, PART)
    _, b = E.project_determinant(psi, core, PART)
    for x, y in ((a.up, b.up), (a.dn, b.dn)):
        g = np.linalg.lstsq(x, y, rcond=None)[0]
        np.testing.assert_allclose(x @ g, y, atol=1e-12)
    scale = np.linalg.det(m) * np.linalg.det(n)
    for _ in range(2):
        tr = T.MultiDet(amplitudes=T.AmplitudeMap(4, 2, 2, rng.normal(size=36) + 1j * rng.normal(size=36)))
        o1 = E.embedded_overlap(tr, phi, core, PART)
        o2 = E.embedded_overlap(tr, psi, core, PART)
        assert abs(o2 - scale * o1) < 1e-11 * abs(o2)
