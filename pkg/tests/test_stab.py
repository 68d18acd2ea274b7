from collections import defaultdict

import numpy as np
import pytest

from qcafqmc.qsim import circuit_unitary, gate
from qcafqmc.stab import (CliffordTableau, GForm, clifford_amplitudes, clifford_group_order, enumerate_canonical,
                          enumerate_cliffords, enumerate_gforms, gform_amplitudes, gform_circuit, apply_gform,
                          read_stab, sample_uniform_clifford, stabilizer_state_count, to_measurement_form,
                          two_qubit_depth, write_stab)

X = np.array([[0, 1], [1, 0]])
Z = np.diag([1, -1])


def _pauli(p, x, z):
    m = np.array([[1]])
    for q in range(len(x)):
        f = np.eye(2)
        if x[q]:
            f = X
        if z[q]:
            f = f @ Z
        m = np.kron(m, f)
    return (1j) ** p * m


def _random_circuit(n, length, rng):
    gs = []
    for _ in range(length):
        if n > 1 and rng.random() < 0.5:
            a, b = rng.choice(n, 2, replace=False)
            gs.append(gate(str(rng.choice(["CNOT", "CZ", "SWAP"])), a, b))
        else:
            gs.append(gate(str(rng.choice(["H", "P", "PDG", "X", "Z", "Y"])), rng.integers(n)))
    return gs


@pytest.mark.parametrize("n", [1, 2, 3])
def test_tableau_conjugation_and_amplitudes(n, rng):
    for _ in range(25):
        gs = _random_circuit(n, 20, rng)
        u = circuit_unitary(gs, n)
        t = CliffordTableau.from_gates(gs, n)
        ti = t.inverse()
        for r in range(2 * n):
            e = np.zeros(n, int)
            e[r % n] = 1
            p = _pauli(0, e if r < n else 0 * e, e if r >= n else 0 * e)
            np.testing.assert_allclose(u @ p @ u.conj().T, _pauli(t.phase[r], t.x[r], t.z[r]), atol=1e-12)
            np.testing.assert_allclose(u.conj().T @ p @ u, _pauli(ti.phase[r], ti.x[r], ti.z[r]), atol=1e-12)
        col = u[:, 0]
        x0 = np.nonzero(np.abs(col) > 1e-9)[0][0]
        un = u * np.abs(col[x0]) / col[x0]
        b = np.arange(2**n)[:, None]
        beta = np.arange(2**n)[None, :]
        np.testing.assert_allclose(clifford_amplitudes(t, b, beta), un, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_gform_equivalence(n, rng):
    for _ in range(20):
        t = sample_uniform_clifford(n, rng)
        g = to_measurement_form(t)
        gmat = circuit_unitary(gform_circuit(g), n)
        b = np.arange(2**n)[:, None]
        x = np.arange(2**n)[None, :]
        np.testing.assert_allclose(gform_amplitudes(g, b, x), gmat, atol=1e-12)
        v = rng.normal(size=2**n) + 1j * rng.normal(size=2**n)
        np.testing.assert_allclose(apply_gform(g, v), gmat @ v, atol=1e-12)
        ucols = clifford_amplitudes(t, b, x)
        for bp in range(2**n):
            bb = int(g.map_outcomes(bp))
            pu = np.outer(ucols[bb].conj(), ucols[bb])
            pg = np.outer(gmat[bp].conj(), gmat[bp])
            np.testing.assert_allclose(pu, pg, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2])
def test_sampler_uniform_over_symplectic_group(n):
    acc = defaultdict(float)
    for w, m in enumerate_canonical(n):
        acc[m.tobytes()] += w
    vals = np.array(list(acc.values()))
    np.testing.assert_allclose(vals, 1.0 / len(acc), rtol=1e-12)
    # Clifford group mod phases over Pauli signs is the symplectic group
    assert len(acc) == clifford_group_order(n) // 4**n


def test_enumerated_gform_count():
    # one GForm per stabilizer state up to the outcome relabelling
    for n in (1, 2, 3):
        assert len(enumerate_gforms(n)) == stabilizer_state_count(n) // 2**n


def test_gform_depth_bound(rng):
    n = 8
    worst = 0
    for _ in range(200):
        g = to_measurement_form(sample_uniform_clifford(n, rng))
        worst = max(worst, two_qubit_depth(gform_circuit(g), n))
    assert worst <= 2 * n + 2


def test_stab_file_roundtrip(tmp_path, rng):
    ts = [sample_uniform_clifford(3, rng) for _ in range(4)]
    gs = [to_measurement_form(t) for t in ts]
    write_stab(tmp_path / "c.stab", ts, gs)
    ts2, gs2 = read_stab(tmp_path / "c.stab")
    assert ts2 == ts and gs2 == gs
    assert GForm.identity(3).k == 0


def test_estimator_needs_no_affine_correction(rng):
    # conj(<b|U|beta>) <b|U|0> with b = post(b') equals the same product for G and raw b'
    n = 3
    b = np.arange(2**n)[:, None]
    x = np.arange(2**n)[None, :]
    for _ in range(20):
        u = sample_uniform_clifford(n, rng)
        g = to_measurement_form(u)
        ua = clifford_amplitudes(u, b, x)
        ga = gform_amplitudes(g, b, x)
        for bp in range(2**n):
            bb = int(g.map_outcomes(bp))
            np.testing.assert_allclose(np.conj(ua[bb]) * ua[bb, 0], np.conj(ga[bp]) * ga[bp, 0], atol=1e-12)
        # ignoring the correction would pair G-amplitudes with U-outcomes and break it
        if not (np.array_equal(g.post_m, np.eye(n)) and not g.post_s.any()):
            bad = max(np.abs(np.conj(ua[bp]) * ua[bp, 0] - np.conj(ga[bp]) * ga[bp, 0]).max() for bp in range(2**n))
            assert bad > 1e-6
