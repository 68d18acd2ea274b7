import numpy as np
import pytest
import scipy.linalg

from qcafqmc.qsim import (MAX_QUBITS, NoiseModel, StateVector, amplitude, apply_circuit, apply_circuit_batch,
                          apply_gate, circuit_unitary, gate, hop, hop_gates, sample_measurement)


def _annihilator(j: int, n: int) -> np.ndarray:
    z = np.diag([1.0, -1.0])
    lower = np.array([[0.0, 1.0], [0.0, 0.0]])
    m = np.array([[1.0]])
    for q in range(n):
        m = np.kron(m, z if q < j else lower if q == j else np.eye(2))
    return m


def test_gates_are_unitary():
    for g in [gate("H", 0), gate("P", 1), gate("CNOT", 0, 2), gate("CZ", 2, 1), gate("SWAP", 0, 1),
              gate("GivensXXYY", 1, 2, param=0.3), gate("CPhase", 0, 2, param=1.1)]:
        u = circuit_unitary([g], 3)
        np.testing.assert_allclose(u.conj().T @ u, np.eye(8), atol=1e-14)


def test_qubit_zero_is_msb():
    sv = apply_gate(StateVector(3), "X", [0])
    assert abs(amplitude(sv, "100") - 1) < 1e-15
    assert abs(sv.amplitudes[4] - 1) < 1e-15


def test_cnot_direction():
    sv = StateVector.basis_state("10")
    apply_gate(sv, gate("CNOT", 0, 1))
    assert abs(amplitude(sv, "11") - 1) < 1e-15


@pytest.mark.parametrize("i,j", [(0, 1), (1, 0), (0, 3), (3, 1), (2, 4)])
def test_hop_matches_fermionic_generator(i, j, rng):
    n = 5
    ai, aj = _annihilator(i, n), _annihilator(j, n)
    gen = ai.T @ aj - aj.T @ ai
    psi = rng.normal(size=2**n) + 1j * rng.normal(size=2**n)
    ref = scipy.linalg.expm(0.37 * gen) @ psi
    out = hop(StateVector(n, psi), i, j, 0.37).amplitudes
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_hop_gates_adjacent(rng):
    psi = rng.normal(size=16) + 1j * rng.normal(size=16)
    a = apply_circuit(StateVector(4, psi), hop_gates(1, -0.8)).amplitudes
    b = hop(StateVector(4, psi), 1, 2, -0.8).amplitudes
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_batch_matches_single(rng):
    gates = [gate("H", 0), gate("CNOT", 0, 2), gate("CPhase", 1, 2, param=0.4), gate("PDG", 1)]
    cols = rng.normal(size=(8, 3)) + 0j
    np.testing.assert_allclose(apply_circuit_batch(cols, gates, 3), circuit_unitary(gates, 3) @ cols, atol=1e-14)


def test_sampling_and_noise(rng):
    sv = StateVector.basis_state("01")
    s = sample_measurement(sv, NoiseModel(0.0), rng, shots=200)
    assert np.all(s == 1)
    s = sample_measurement(sv, NoiseModel(0.5), rng, shots=40000)
    # (1 - p) + p / 4 on the ideal outcome
    assert abs(np.mean(s == 1) - 0.625) < 0.01
    with pytest.raises(ValueError):
        NoiseModel(1.5)


def test_limits():
    with pytest.raises(ValueError):
        StateVector(MAX_QUBITS + 1)
    with pytest.raises(ValueError):
        apply_gate(StateVector(2), gate("CNOT", 0, 0))


def test_givens_convention():
    # GivensXXYY(theta) = exp(i theta (XX + YY) / 2)
    x = np.array([[0, 1], [1, 0]])
    y = np.array([[0, -1j], [1j, 0]])
    for theta in (0.3, np.pi / 2, -1.1):
        ref = scipy.linalg.expm(0.5j * theta * (np.kron(x, x) + np.kron(y, y)))
        np.testing.assert_allclose(circuit_unitary([gate("GivensXXYY", 0, 1, param=theta)], 2), ref, atol=1e-14)
    sv = apply_gate(StateVector.basis_state("01"), gate("GivensXXYY", 0, 1, param=np.pi / 2))
    assert abs(amplitude(sv, "10") - 1j) < 1e-15
