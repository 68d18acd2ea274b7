"""Dense statevector simulator.

Qubit 0 is the most significant bit of the basis index. Under the Jordan-Wigner
mapping used throughout, qubits 0..n_orb-1 are the up-spin orbitals and
n_orb..2*n_orb-1 the down-spin orbitals.

Gate conventions (all exact unitaries):

* ``P`` is the phase gate diag(1, i); ``PDG`` its inverse.
* ``GivensXXYY(theta)`` is exp(i*theta*(XX+YY)/2), so |01> -> cos(theta)|01> + i sin(theta)|10>.
* ``CPhase(theta)`` is diag(1, 1, 1, e^{i theta}).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MAX_QUBITS = 24

_SQ = 1 / np.sqrt(2)
_ONE_QUBIT = {
    "H": np.array([[_SQ, _SQ], [_SQ, -_SQ]], dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    "P": np.array([[1, 0], [0, 1j]], dtype=complex),
    "PDG": np.array([[1, 0], [0, -1j]], dtype=complex),
}
_TWO_QUBIT_FIXED = {
    "CNOT": np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex),
    "CZ": np.diag([1, 1, 1, -1]).astype(complex),
    "SWAP": np.array([[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=complex),
}


@dataclass(frozen=True)
class Gate:
    name: str
    targets: tuple[int, ...]
    param: float | None = None

    def __repr__(self) -> str:
        p = f", {self.param:.6g}" if self.param is not None else ""
        return f"Gate({self.name}, {self.targets}{p})"


def gate(name: str, *targets: int, param: float | None = None) -> Gate:
    return Gate(name, tuple(int(t) for t in targets), param)


def gate_matrix(g: Gate) -> np.ndarray:
    if g.name in _ONE_QUBIT:
        return _ONE_QUBIT[g.name]
    if g.name in _TWO_QUBIT_FIXED:
        return _TWO_QUBIT_FIXED[g.name]
    if g.name == "GivensXXYY":
        c, s = np.cos(g.param), np.sin(g.param)
        return np.array([[1, 0, 0, 0], [0, c, 1j * s, 0], [0, 1j * s, c, 0], [0, 0, 0, 1]], dtype=complex)
    if g.name == "CPhase":
        return np.diag([1, 1, 1, np.exp(1j * g.param)])
    raise ValueError(f"unknown gate {g.name!r}")


@dataclass(frozen=True)
class NoiseModel:
    depolarizing_p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.depolarizing_p <= 1.0:
            raise ValueError(f"depolarizing probability {self.depolarizing_p} outside [0, 1]")


@dataclass
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits={self.n_qubits} outside 1..{MAX_QUBITS}")
        if self.amplitudes is None:
            self.amplitudes = np.zeros(2**self.n_qubits, dtype=complex)
            self.amplitudes[0] = 1.0
        else:
            self.amplitudes = np.asarray(self.amplitudes, dtype=complex).copy()
            if self.amplitudes.shape != (2**self.n_qubits,):
                raise ValueError("amplitude vector length must be 2**n_qubits")

    @classmethod
    def basis_state(cls, bits: str | Sequence[int]) -> "StateVector":
        bits = [int(b) for b in bits]
        sv = cls(len(bits))
        sv.amplitudes[0] = 0.0
        sv.amplitudes[bits_to_index(bits)] = 1.0
        return sv

    def copy(self) -> "StateVector":
        return StateVector(self.n_qubits, self.amplitudes)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def probabilities(self) -> np.ndarray:
        p = np.abs(self.amplitudes) ** 2
        return p / p.sum()

    def dump(self, tol: float = 1e-12) -> str:
        lines = []
        for i, a in enumerate(self.amplitudes):
            if abs(a) > tol:
                lines.append(f"{i:0{self.n_qubits}b} {a.real:+.12f} {a.imag:+.12f}")
        return "\n".join(lines)


def bits_to_index(bits: Sequence[int]) -> int:
    v = 0
    for b in bits:
        v = (v << 1) | int(b)
    return v


def index_to_bits(i: int, n: int) -> str:
    return format(int(i), f"0{n}b")


def apply_gate(state: StateVector, g: Gate | str, targets: Sequence[int] | None = None,
               param: float | None = None) -> StateVector:
    """Apply a gate in place and return the state."""
    if isinstance(g, str):
        g = Gate(g, tuple(targets or ()), param)
    n = state.n_qubits
    t = g.targets
    if len(set(t)) != len(t) or any(not 0 <= q < n for q in t):
        raise ValueError(f"bad targets {t} for {n} qubits")
    m = gate_matrix(g)
    k = len(t)
    if m.shape != (2**k, 2**k):
        raise ValueError(f"gate {g.name} expects {int(np.log2(m.shape[0]))} targets, got {k}")
    psi = state.amplitudes.reshape((2,) * n)
    psi = np.moveaxis(psi, t, range(k))
    shape = psi.shape
    psi = (m @ psi.reshape(2**k, -1)).reshape(shape)
    state.amplitudes = np.moveaxis(psi, range(k), t).reshape(-1)
    return state


def apply_circuit(state: StateVector, gates: Iterable[Gate]) -> StateVector:
    for g in gates:
        apply_gate(state, g)
    return state


def circuit_unitary(gates: Sequence[Gate], n_qubits: int) -> np.ndarray:
    """Dense unitary of a gate list (columns = images of basis states)."""
    dim = 2**n_qubits
    cols = np.eye(dim, dtype=complex)
    out = np.empty((dim, dim), dtype=complex)
    for j in range(dim):
        sv = StateVector(n_qubits, cols[:, j])
        apply_circuit(sv, gates)
        out[:, j] = sv.amplitudes
    return out


def apply_circuit_batch(columns: np.ndarray, gates: Iterable[Gate], n_qubits: int) -> np.ndarray:
    """Apply a gate list to several statevectors at once; ``columns`` is (2**n, m)."""
    m = columns.shape[1]
    psi = np.asarray(columns, dtype=complex).reshape((2,) * n_qubits + (m,))
    for g in gates:
        t = g.targets
        k = len(t)
        mat = gate_matrix(g)
        psi = np.moveaxis(psi, t, range(k))
        shape = psi.shape
        psi = (mat @ psi.reshape(2**k, -1)).reshape(shape)
        psi = np.moveaxis(psi, range(k), t)
    return psi.reshape(2**n_qubits, m)


def hop(state: StateVector, i: int, j: int, theta: float) -> StateVector:
    """exp(theta (a^+_i a_j - a^+_j a_i)) under Jordan-Wigner, any i != j.

    For adjacent modes this equals the gate list [P(lo), GivensXXYY(theta), PDG(lo)]
    (see ``hop_gates``); for non-adjacent modes the parity of the modes in between
    flips the angle.
    """
    lo, hi = min(i, j), max(i, j)
    ang = theta if i < j else -theta
    n = state.n_qubits
    psi = state.amplitudes.reshape((2,) * n)
    psi = np.moveaxis(psi, (lo, hi), (0, 1)).copy()
    rest = psi.shape[2:]
    if hi - lo > 1:
        idx = np.indices(rest).reshape(len(rest), -1) if rest else np.zeros((0, 1), dtype=int)
        # axes 2.. are the remaining qubits in original order with lo, hi removed
        order = [q for q in range(n) if q not in (lo, hi)]
        between = [order.index(q) for q in range(lo + 1, hi)]
        parity = idx[between].sum(axis=0) % 2 if between else np.zeros(idx.shape[1], dtype=int)
        sign = np.where(parity == 1, -1.0, 1.0).reshape(rest)
    else:
        sign = np.ones(rest)
    c = np.cos(ang * sign)
    s = np.sin(ang * sign)
    a01 = psi[0, 1].copy()
    a10 = psi[1, 0].copy()
    # generator maps |0_lo 1_hi> -> |1_lo 0_hi> with + sign
    psi[1, 0] = c * a10 + s * a01
    psi[0, 1] = c * a01 - s * a10
    state.amplitudes = np.moveaxis(psi, (0, 1), (lo, hi)).reshape(-1)
    return state


def hop_gates(lo: int, theta: float) -> list[Gate]:
    """Gate list for exp(theta (a^+_lo a_{lo+1} - h.c.)) on adjacent qubits."""
    return [gate("P", lo), gate("GivensXXYY", lo, lo + 1, param=theta), gate("PDG", lo)]


def amplitude(state: StateVector, bits: str | Sequence[int]) -> complex:
    bits = [int(b) for b in bits]
    if len(bits) != state.n_qubits:
        raise ValueError(f"bitstring length {len(bits)} != {state.n_qubits} qubits")
    return complex(state.amplitudes[bits_to_index(bits)])


def sample_measurement(state: StateVector, noise: NoiseModel, rng: np.random.Generator,
                       shots: int | None = None) -> np.ndarray | int:
    """Computational-basis samples (as integer indices) under a global depolarizing channel.

    With probability p a sample is drawn uniformly, else from |amplitude|^2; this is
    exactly measuring (1-p) rho + p I/2^n.
    """
    probs = state.probabilities()
    n_out = 1 if shots is None else shots
    ideal = rng.choice(probs.size, size=n_out, p=probs)
    if noise.depolarizing_p > 0.0:
        flip = rng.random(n_out) < noise.depolarizing_p
        uniform = rng.integers(0, probs.size, size=n_out)
        ideal = np.where(flip, uniform, ideal)
    return int(ideal[0]) if shots is None else ideal
