"""Trial wavefunctions: single/multi-determinant, circuit-defined, and shadow-reconstructed.

Overlap convention: ``trial_overlap(trial, det)`` is <Psi_T|phi>, i.e. the sum over
configurations of conj(trial amplitude) times the determinant's amplitude. For a
single determinant trial this is ``slater.overlap(trial_det, det)``.

An offline rotation R (per spin, n_orb x n_orb unitary) means Psi_T = R^ Psi_stored,
where R^ maps a^+_q -> sum_p R[p, q] a^+_p. Queries therefore evaluate the stored
state against the walker with coefficients R^dag Phi.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from . import qsim
from .hamio import CholeskyFactors, Hamiltonian
from .oracle import SectorBasis, SectorHamiltonian
from .slater import OrthogonalWalkerError, SlaterDeterminant, greens_function, orthonormalize, string_minors

CIRCUIT_FORMAT = "qcafqmc-circuit-trial"
CIRCUIT_VERSION = 1


# --- amplitude maps -------------------------------------------------------------

@dataclass(frozen=True)
class AmplitudeMap:
    """Complex amplitudes over a fixed (n_alpha, n_beta) sector, in SectorBasis order."""

    n_orb: int
    n_alpha: int
    n_beta: int
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=complex).copy()
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)
        if v.shape != (self.basis.dim,):
            raise ValueError(f"amplitude vector has shape {v.shape}, sector dimension is {self.basis.dim}")

    @property
    def basis(self) -> SectorBasis:
        return SectorBasis(self.n_orb, self.n_alpha, self.n_beta)

    @classmethod
    def from_dict(cls, n_orb: int, n_alpha: int, n_beta: int, amps: dict) -> "AmplitudeMap":
        basis = SectorBasis(n_orb, n_alpha, n_beta)
        v = np.zeros(basis.dim, dtype=complex)
        for (bu, bd), a in amps.items():
            ou, od = _occ(bu), _occ(bd)
            if len(ou) != n_alpha or len(od) != n_beta:
                raise ValueError(f"configuration ({bu}, {bd}) has the wrong Hamming weight")
            v[basis.index(ou, od)] = a
        return cls(n_orb, n_alpha, n_beta, v)

    def to_dict(self, tol: float = 0.0) -> dict:
        b = self.basis
        return {b.bits(i): complex(a) for i, a in enumerate(self.vector) if abs(a) > tol}

    def __getitem__(self, config) -> complex:
        bu, bd = config
        return complex(self.vector[self.basis.index(_occ(bu), _occ(bd))])

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def _occ(bits) -> list[int]:
    if isinstance(bits, str):
        return [p for p, c in enumerate(bits) if c == "1"]
    return [p for p, b in enumerate(bits) if int(b)]


def write_amplitudes(amps: AmplitudeMap, path, tol: float = 0.0) -> None:
    with open(path, "w") as f:
        f.write(f"# amplitudes n_orb={amps.n_orb} n_alpha={amps.n_alpha} n_beta={amps.n_beta}\n")
        for (bu, bd), a in amps.to_dict(tol).items():
            f.write(f"{bu} {bd} {a.real:.17e} {a.imag:.17e}\n")


def read_amplitudes(path, n_orb: int | None = None) -> AmplitudeMap:
    amps = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'occ_up occ_dn re im'")
            amps[(parts[0], parts[1])] = float(parts[2]) + 1j * float(parts[3])
    if not amps:
        raise ValueError(f"{path}: no amplitudes")
    bu, bd = next(iter(amps))
    n = n_orb or len(bu)
    return AmplitudeMap.from_dict(n, bu.count("1"), bd.count("1"), amps)


# --- circuit spec ---------------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    """One ansatz layer over spin-orbital pairs (up p -> p, down p -> n_orb + p).

    ``density``: exp(i theta n_p n_q) per pair; ``hopping``: exp(theta (a^+_p a_q - a^+_q a_p))
    for same-spin pairs.
    """

    kind: str
    pairs: tuple[tuple[int, int], ...]
    angles: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))
        object.__setattr__(self, "angles", tuple(float(t) for t in self.angles))
        if self.kind not in ("density", "hopping"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if len(self.pairs) != len(self.angles):
            raise ValueError("one angle per pair required")
        if not all(np.isfinite(self.angles)):
            raise ValueError("layer angles must be finite")
        for a, b in self.pairs:
            if a == b:
                raise ValueError(f"layer pair ({a}, {b}) repeats a mode")


@dataclass(frozen=True)
class CircuitTrialSpec:
    """Perfect-pairing state followed by density/hopping layers.

    ``pairing[i] = (occupied, virtual)`` spatial orbitals of pair i (default i <-> n_orb-1-i).
    ``rotation_angles`` parametrize the offline orbital rotation as Givens rotations over
    orbital pairs p < q in lexicographic order, shared by both spins.
    """

    n_orb: int
    n_pairs: int
    pp_thetas: tuple[float, ...]
    layers: tuple[Layer, ...] = ()
    pairing: tuple[tuple[int, int], ...] | None = None
    qubit_map: tuple[int, ...] | None = None
    rotation_angles: tuple[float, ...] | None = None

    def __post_init__(self):
        n = self.n_orb
        object.__setattr__(self, "pp_thetas", tuple(float(t) for t in self.pp_thetas))
        if len(self.pp_thetas) != self.n_pairs:
            raise ValueError("one pp angle per pair required")
        if not all(np.isfinite(self.pp_thetas)):
            raise ValueError("pp angles must be finite")
        if self.pairing is None:
            object.__setattr__(self, "pairing", tuple((i, n - 1 - i) for i in range(self.n_pairs)))
        else:
            object.__setattr__(self, "pairing", tuple((int(a), int(b)) for a, b in self.pairing))
        used = [o for p in self.pairing for o in p]
        if len(self.pairing) != self.n_pairs or len(set(used)) != len(used) or any(not 0 <= o < n for o in used):
            raise ValueError(f"invalid pairing {self.pairing} for {n} orbitals")
        if self.qubit_map is None:
            object.__setattr__(self, "qubit_map", tuple(range(2 * n)))
        else:
            object.__setattr__(self, "qubit_map", tuple(int(q) for q in self.qubit_map))
        if sorted(self.qubit_map) != list(range(2 * n)):
            raise ValueError("qubit_map must be a permutation of the 2*n_orb spin orbitals")
        object.__setattr__(self, "layers", tuple(self.layers))
        for layer in self.layers:
            for a, b in layer.pairs:
                if not (0 <= a < 2 * n and 0 <= b < 2 * n):
                    raise ValueError(f"layer pair ({a}, {b}) out of range")
                if layer.kind == "hopping" and (a < n) != (b < n):
                    raise ValueError(f"hopping pair ({a}, {b}) mixes spins")
        if self.rotation_angles is not None:
            object.__setattr__(self, "rotation_angles", tuple(float(t) for t in self.rotation_angles))
            if len(self.rotation_angles) != n * (n - 1) // 2:
                raise ValueError("rotation_angles needs one angle per orbital pair")

    @property
    def n_qubits(self) -> int:
        return 2 * self.n_orb

    @property
    def n_alpha(self) -> int:
        return self.n_pairs

    @property
    def n_beta(self) -> int:
        return self.n_pairs

    def parameters(self) -> np.ndarray:
        p = list(self.pp_thetas)
        for layer in self.layers:
            p.extend(layer.angles)
        if self.rotation_angles is not None:
            p.extend(self.rotation_angles)
        return np.array(p)

    def with_parameters(self, params: Sequence[float]) -> "CircuitTrialSpec":
        params = list(map(float, params))
        k = self.n_pairs
        thetas, rest = params[:k], params[k:]
        layers = []
        for layer in self.layers:
            m = len(layer.angles)
            layers.append(Layer(layer.kind, layer.pairs, tuple(rest[:m])))
            rest = rest[m:]
        rot = tuple(rest) if self.rotation_angles is not None else None
        if self.rotation_angles is None and rest:
            raise ValueError("too many parameters")
        return replace(self, pp_thetas=tuple(thetas), layers=tuple(layers), rotation_angles=rot)

    def rotation(self) -> np.ndarray | None:
        if self.rotation_angles is None:
            return None
        return givens_rotation_matrix(self.n_orb, self.rotation_angles)

    def to_json(self) -> str:
        doc = {
            "format": CIRCUIT_FORMAT, "version": CIRCUIT_VERSION, "n_orb": self.n_orb, "n_pairs": self.n_pairs,
            "pp_thetas": list(self.pp_thetas), "pairing": [list(p) for p in self.pairing],
            "layers": [{"kind": l.kind, "pairs": [list(p) for p in l.pairs], "angles": list(l.angles)}
                       for l in self.layers],
            "qubit_map": list(self.qubit_map),
            "rotation_angles": None if self.rotation_angles is None else list(self.rotation_angles),
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CircuitTrialSpec":
        doc = json.loads(text)
        if doc.get("format") != CIRCUIT_FORMAT or doc.get("version") != CIRCUIT_VERSION:
            raise ValueError(f"not a {CIRCUIT_FORMAT} v{CIRCUIT_VERSION} document")
        layers = tuple(Layer(l["kind"], tuple(map(tuple, l["pairs"])), tuple(l["angles"])) for l in doc["layers"])
        rot = doc.get("rotation_angles")
        return cls(doc["n_orb"], doc["n_pairs"], tuple(doc["pp_thetas"]), layers,
                   tuple(map(tuple, doc["pairing"])), tuple(doc["qubit_map"]),
                   None if rot is None else tuple(rot))


def givens_rotation_matrix(n_orb: int, angles: Sequence[float]) -> np.ndarray:
    """Product of exp(phi (e_pq - e_qp)) over p < q, earlier pairs applied first."""
    r = np.eye(n_orb)
    for (p, q), phi in zip(_orbital_pairs(n_orb), angles):
        g = np.eye(n_orb)
        c, s = np.cos(phi), np.sin(phi)
        g[p, p] = g[q, q] = c
        g[p, q], g[q, p] = s, -s
        r = g @ r
    return r


def _orbital_pairs(n: int) -> list[tuple[int, int]]:
    return [(p, q) for p in range(n) for q in range(p + 1, n)]


def default_layers(n_orb: int, n_hop_layers: int = 2) -> tuple[Layer, ...]:
    """Hopping (nearest orbitals, both spins) / on-site density / hopping template."""
    n = n_orb
    hop_pairs = tuple((p, p + 1) for p in range(n - 1)) + tuple((n + p, n + p + 1) for p in range(n - 1))
    dens_pairs = tuple((p, n + q) for p in range(n) for q in range(n))
    layers = []
    for i in range(n_hop_layers):
        layers.append(Layer("hopping", hop_pairs, (0.0,) * len(hop_pairs)))
        if i < n_hop_layers - 1:
            layers.append(Layer("density", dens_pairs, (0.0,) * len(dens_pairs)))
    return tuple(layers)


# --- state construction ----------------------------------------------------------

def _pp_qubit_bits(spec: CircuitTrialSpec) -> list[tuple[int, int]]:
    """Qubit pairs (up, down) carrying the occupied and virtual member of each pair."""
    n, qm = spec.n_orb, spec.qubit_map
    return [((qm[i], qm[n + i]), (qm[a], qm[n + a])) for i, a in spec.pairing]


def circuit_statevector(spec: CircuitTrialSpec) -> qsim.StateVector:
    """Full 2n-qubit statevector of the ansatz (before the offline rotation)."""
    nq = spec.n_qubits
    psi = np.zeros(2**nq, dtype=complex)
    for choice in range(2**spec.n_pairs):
        amp = 1.0
        idx = 0
        for k, ((ou, od), (vu, vd)) in enumerate(_pp_qubit_bits(spec)):
            if (choice >> k) & 1:
                amp *= np.sin(spec.pp_thetas[k])
                idx |= (1 << (nq - 1 - vu)) | (1 << (nq - 1 - vd))
            else:
                amp *= np.cos(spec.pp_thetas[k])
                idx |= (1 << (nq - 1 - ou)) | (1 << (nq - 1 - od))
        psi[idx] += amp
    state = qsim.StateVector(nq, psi)
    _apply_layers_qubits(state, spec)
    return state


def _apply_layers_qubits(state: qsim.StateVector, spec: CircuitTrialSpec) -> None:
    qm = spec.qubit_map
    for layer in spec.layers:
        for (a, b), theta in zip(layer.pairs, layer.angles):
            if layer.kind == "density":
                qsim.apply_gate(state, qsim.gate("CPhase", qm[a], qm[b], param=theta))
            else:
                qsim.hop(state, qm[a], qm[b], theta)


def _gather_signs(spec: CircuitTrialSpec, basis: SectorBasis) -> tuple[np.ndarray, np.ndarray]:
    """Qubit indices of sector configurations and the reordering sign to canonical order."""
    n, qm = spec.n_orb, spec.qubit_map
    nq = 2 * n
    idx = np.empty(basis.dim, dtype=np.int64)
    sign = np.empty(basis.dim)
    for c, (sa, sb) in enumerate(basis.configs()):
        modes = list(sa) + [n + p for p in sb]
        qubits = [qm[m] for m in modes]
        v = 0
        for q in qubits:
            v |= 1 << (nq - 1 - q)
        idx[c] = v
        # creation operators in qubit order vs canonical (mode) order
        order = np.argsort(qubits)
        inv = sum(1 for i in range(len(order)) for j in range(i + 1, len(order)) if order[i] > order[j])
        sign[c] = -1.0 if inv % 2 else 1.0
    return idx, sign


def build_pp_state(spec: CircuitTrialSpec) -> AmplitudeMap:
    """Sector amplitudes of the ansatz state (offline rotation not applied)."""
    if spec.n_qubits > qsim.MAX_QUBITS:
        raise ValueError(f"{spec.n_qubits} qubits exceed the simulator limit")
    basis = SectorBasis(spec.n_orb, spec.n_alpha, spec.n_beta)
    sv = circuit_statevector(spec)
    idx, sign = _gather_signs(spec, basis)
    return AmplitudeMap(spec.n_orb, spec.n_alpha, spec.n_beta, sv.amplitudes[idx] * sign)


def prepare_tau_gates(spec: CircuitTrialSpec) -> list:
    """Gate list preparing the pair-product part of (|0> + |Psi>)/sqrt(2) from |0...0>.

    Hadamard on the first pair's occupied up qubit, CNOT fan-out to the other pairs'
    occupied up qubits, then per pair a real Givens rotation (occupied up -> virtual up)
    and CNOTs copying the up pattern onto the down qubits. Layers follow separately.
    """
    if spec.n_pairs == 0:
        raise ValueError("prepare_tau requires eta > 0")
    bits = _pp_qubit_bits(spec)
    lead = bits[0][0][0]
    gates = [qsim.gate("H", lead)]
    for (ou, _), _ in bits[1:]:
        gates.append(qsim.gate("CNOT", lead, ou))
    for k, ((ou, od), (vu, vd)) in enumerate(bits):
        t = spec.pp_thetas[k]
        # [P, Givens(-t), PDG] on (ou, vu) maps |1_ou 0_vu> -> cos t |10> + sin t |01>
        gates += [qsim.gate("P", ou), qsim.gate("GivensXXYY", ou, vu, param=-t), qsim.gate("PDG", ou)]
        gates += [qsim.gate("CNOT", ou, od), qsim.gate("CNOT", vu, vd)]
    return gates


def prepare_tau(spec: CircuitTrialSpec) -> qsim.StateVector:
    """(|0...0> + |Psi_circuit>)/sqrt(2) on 2*n_orb qubits."""
    state = qsim.StateVector(spec.n_qubits)
    qsim.apply_circuit(state, prepare_tau_gates(spec))
    _apply_layers_qubits(state, spec)
    return state


# --- trial variants ----------------------------------------------------------------

@dataclass(frozen=True, kw_only=True)
class TrialWavefunction:
    offline_rotation: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.offline_rotation is not None:
            r = self.offline_rotation
            if isinstance(r, np.ndarray):
                r = (r, r)
            r = tuple(np.asarray(m, dtype=complex) for m in r)
            for m in r:
                if m.shape != (self.n_orb, self.n_orb) or not np.allclose(m.conj().T @ m, np.eye(self.n_orb), atol=1e-10):
                    raise ValueError("offline rotation must be a unitary n_orb x n_orb matrix per spin")
            object.__setattr__(self, "offline_rotation", r)

    @property
    def basis(self) -> SectorBasis:
        return SectorBasis(self.n_orb, self.n_alpha, self.n_beta)

    @cached_property
    def stored_vector(self) -> np.ndarray:
        """Sector vector of the stored state (no offline rotation)."""
        raise NotImplementedError

    @cached_property
    def sector_vector(self) -> np.ndarray:
        """Sector vector of Psi_T in the Hamiltonian orbital basis."""
        v = self.stored_vector
        if self.offline_rotation is None:
            return v
        return self.basis.rotate_vector(*self.offline_rotation, v)

    def rotate_walker(self, det: SlaterDeterminant) -> SlaterDeterminant:
        if self.offline_rotation is None:
            return det
        ru, rd = self.offline_rotation
        return SlaterDeterminant(ru.conj().T @ det.up, rd.conj().T @ det.dn)


@dataclass(frozen=True)
class SingleDet(TrialWavefunction):
    det: SlaterDeterminant

    n_orb = property(lambda self: self.det.n_orb)
    n_alpha = property(lambda self: self.det.n_alpha)
    n_beta = property(lambda self: self.det.n_beta)

    @cached_property
    def stored_vector(self) -> np.ndarray:
        b = self.basis
        ca = string_minors(self.det.up, b.strings_alpha)
        cb = string_minors(self.det.dn, b.strings_beta)
        return np.outer(ca, cb).reshape(-1)

    @cached_property
    def rotated_det(self) -> SlaterDeterminant:
        if self.offline_rotation is None:
            return self.det
        ru, rd = self.offline_rotation
        return SlaterDeterminant(ru @ self.det.up, rd @ self.det.dn)


@dataclass(frozen=True)
class MultiDet(TrialWavefunction):
    amplitudes: AmplitudeMap

    n_orb = property(lambda self: self.amplitudes.n_orb)
    n_alpha = property(lambda self: self.amplitudes.n_alpha)
    n_beta = property(lambda self: self.amplitudes.n_beta)

    @cached_property
    def stored_vector(self) -> np.ndarray:
        return np.asarray(self.amplitudes.vector)


@dataclass(frozen=True)
class Circuit(TrialWavefunction):
    spec: CircuitTrialSpec

    n_orb = property(lambda self: self.spec.n_orb)
    n_alpha = property(lambda self: self.spec.n_alpha)
    n_beta = property(lambda self: self.spec.n_beta)

    @cached_property
    def stored_vector(self) -> np.ndarray:
        return np.asarray(build_pp_state(self.spec).vector)


@dataclass(frozen=True)
class ShadowReconstructed(TrialWavefunction):
    amplitudes: AmplitudeMap
    std_errors: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    n_orb = property(lambda self: self.amplitudes.n_orb)
    n_alpha = property(lambda self: self.amplitudes.n_alpha)
    n_beta = property(lambda self: self.amplitudes.n_beta)

    @cached_property
    def stored_vector(self) -> np.ndarray:
        return np.asarray(self.amplitudes.vector)


def circuit_trial(spec: CircuitTrialSpec) -> Circuit:
    """Circuit trial carrying the offline rotation of its CircuitTrialSpec."""
    r = spec.rotation()
    return Circuit(spec=spec, offline_rotation=None if r is None else (r, r))


def exact_trial(ham: Hamiltonian) -> MultiDet:
    from .oracle import fci_solve
    _, vec = fci_solve(ham)
    return MultiDet(amplitudes=AmplitudeMap(ham.n_orb, ham.n_alpha, ham.n_beta, vec))


# --- overlap queries -----------------------------------------------------------------

def _check_sector(trial: TrialWavefunction, n_orb: int, na: int, nb: int) -> None:
    if (trial.n_orb, trial.n_alpha, trial.n_beta) != (n_orb, na, nb):
        raise ValueError(
            f"sector mismatch: trial ({trial.n_orb}, {trial.n_alpha}, {trial.n_beta}) vs "
            f"determinant ({n_orb}, {na}, {nb})"
        )


def batch_overlap(trial: TrialWavefunction, ups: np.ndarray, dns: np.ndarray) -> np.ndarray:
    """<Psi_T|D_m> for determinant blocks ups (m, n, n_alpha) and dns (m, n, n_beta)."""
    ups = np.asarray(ups, dtype=complex)
    dns = np.asarray(dns, dtype=complex)
    _check_sector(trial, ups.shape[-2], ups.shape[-1], dns.shape[-1])
    if isinstance(trial, SingleDet):
        t = trial.rotated_det
        out = np.ones(ups.shape[:-2], dtype=complex)
        for blk, tb in ((ups, t.up), (dns, t.dn)):
            if tb.shape[1]:
                out = out * np.linalg.det(tb.conj().T @ blk)
        return out
    if trial.offline_rotation is not None:
        ru, rd = trial.offline_rotation
        ups = ru.conj().T @ ups
        dns = rd.conj().T @ dns
    b = trial.basis
    ca = string_minors(ups, b.strings_alpha)
    cb = string_minors(dns, b.strings_beta)
    v = trial.stored_vector.reshape(b.dim_alpha, b.dim_beta).conj()
    return np.einsum("...a,ab,...b->...", ca, v, cb)


def trial_overlap(trial: TrialWavefunction, det: SlaterDeterminant) -> complex:
    """<Psi_T|phi>."""
    return complex(batch_overlap(trial, det.up[None], det.dn[None])[0])


def circuit_overlap_statevector(trial: Circuit, det: SlaterDeterminant) -> complex:
    """<Psi_T|phi> by contracting full 2^(2n) statevectors (reference path)."""
    spec = trial.spec
    d = trial.rotate_walker(det)
    basis = trial.basis
    idx, sign = _gather_signs(spec, basis)
    ca = string_minors(d.up, basis.strings_alpha)
    cb = string_minors(d.dn, basis.strings_beta)
    phi = np.zeros(2**spec.n_qubits, dtype=complex)
    phi[idx] = np.outer(ca, cb).reshape(-1) * sign
    psi = circuit_statevector(spec).amplitudes
    return complex(np.vdot(psi, phi))


# --- local energy via singles/doubles -------------------------------------------------

def _complete_basis(q: np.ndarray) -> np.ndarray:
    """Unitary whose leading columns are the orthonormal columns of q."""
    n, k = q.shape
    full, _ = np.linalg.qr(np.concatenate([q, np.eye(n, dtype=complex)], axis=1))
    c = full[:, :n].copy()
    c[:, :k] = q
    # Gram-Schmidt the complement against q explicitly for stability
    if k < n:
        comp = c[:, k:] - q @ (q.conj().T @ c[:, k:])
        comp, _ = np.linalg.qr(comp)
        c[:, k:] = comp
    return c


@dataclass
class _Excitations:
    """Determinants within two excitations of a walker, with <D|H|phi> coefficients."""

    ups: np.ndarray
    dns: np.ndarray
    coeffs: np.ndarray
    n_single: tuple[int, int]
    single_index: list  # (spin, i, a) per single, in the order stored after the reference


def _excitation_expansion(ham: Hamiltonian, det: SlaterDeterminant, with_doubles: bool = True) -> tuple[_Excitations, list]:
    qdet, _ = orthonormalize(det)
    cs = [_complete_basis(qdet.up), _complete_basis(qdet.dn)]
    ks = [det.n_alpha, det.n_beta]
    n = det.n_orb
    h = [c.conj().T @ ham.h1 @ c for c in cs]

    def eri(s1, s2):
        c1, c2 = cs[s1], cs[s2]
        v = np.einsum("pqrs,pa,qb->abrs", ham.eri, c1.conj(), c1, optimize=True)
        return np.einsum("abrs,rc,sd->abcd", v, c2.conj(), c2, optimize=True)

    v = {(s1, s2): eri(s1, s2) for s1 in (0, 1) for s2 in (0, 1)}
    occ = [list(range(k)) for k in ks]
    vir = [list(range(k, n)) for k in ks]

    e0 = ham.e_core
    for s in (0, 1):
        e0 += sum(h[s][i, i] for i in occ[s])
        for t in (0, 1):
            for i in occ[s]:
                for j in occ[t]:
                    e0 += 0.5 * v[(s, t)][i, i, j, j]
                    if s == t:
                        e0 -= 0.5 * v[(s, s)][i, j, j, i]

    base = [cs[0][:, :ks[0]], cs[1][:, :ks[1]]]
    ups, dns, coeffs, singles = [base[0]], [base[1]], [e0], []

    def replaced(s, repl):
        blocks = [base[0].copy(), base[1].copy()]
        for (ss, i, a) in repl:
            blocks[ss][:, i] = cs[ss][:, a]
        return blocks

    for s in (0, 1):
        for i in occ[s]:
            for a in vir[s]:
                f = h[s][a, i]
                for t in (0, 1):
                    f += sum(v[(s, t)][a, i, j, j] for j in occ[t])
                f -= sum(v[(s, s)][a, j, j, i] for j in occ[s])
                u, d = replaced(s, [(s, i, a)])
                ups.append(u)
                dns.append(d)
                coeffs.append(f)
                singles.append((s, i, a))
    if with_doubles:
        for s in (0, 1):
            for i1, i in enumerate(occ[s]):
                for j in occ[s][i1 + 1:]:
                    for a1, a in enumerate(vir[s]):
                        for b in vir[s][a1 + 1:]:
                            c = v[(s, s)][a, i, b, j] - v[(s, s)][a, j, b, i]
                            u, d = replaced(s, [(s, i, a), (s, j, b)])
                            ups.append(u)
                            dns.append(d)
                            coeffs.append(c)
        for i in occ[0]:
            for a in vir[0]:
                for j in occ[1]:
                    for b in vir[1]:
                        c = v[(0, 1)][a, i, b, j]
                        u, d = replaced(0, [(0, i, a), (1, j, b)])
                        ups.append(u)
                        dns.append(d)
                        coeffs.append(c)
    ex = _Excitations(np.array(ups), np.array(dns), np.array(coeffs, dtype=complex),
                      (len(vir[0]) * len(occ[0]), len(vir[1]) * len(occ[1])), singles)
    return ex, cs


def local_energy(trial: TrialWavefunction, ham: Hamiltonian, det: SlaterDeterminant,
                 overlap_fn=None) -> complex:
    """<Psi_T|H|phi>/<Psi_T|phi> from zero-, single- and double-excitation overlap queries.

    ``overlap_fn(ups, dns)`` overrides the overlap oracle (used by the embedding code).
    """
    if overlap_fn is None:
        _check_sector(trial, det.n_orb, det.n_alpha, det.n_beta)
        overlap_fn = lambda u, d: batch_overlap(trial, u, d)
    ex, _ = _excitation_expansion(ham, det)
    ov = overlap_fn(ex.ups, ex.dns)
    if abs(ov[0]) < 1e-300 or not np.isfinite(ov[0]):
        raise OrthogonalWalkerError("vanishing trial overlap in local energy")
    return complex(np.dot(ex.coeffs, ov) / ov[0])


def local_energy_exact(trial: TrialWavefunction, ham: Hamiltonian, det: SlaterDeterminant) -> complex:
    """Configuration-basis reference: (H Psi_T)^dag c_phi / Psi_T^dag c_phi."""
    b = trial.basis
    psi = trial.sector_vector
    hpsi = SectorHamiltonian(ham, b).matvec(psi)
    c = np.outer(string_minors(det.up, b.strings_alpha), string_minors(det.dn, b.strings_beta)).reshape(-1)
    den = np.vdot(psi, c)
    if abs(den) < 1e-300:
        raise OrthogonalWalkerError("vanishing trial overlap")
    return complex(np.vdot(hpsi, c) / den)


def force_bias(trial: TrialWavefunction, chol: CholeskyFactors, det: SlaterDeterminant) -> np.ndarray:
    """Mixed expectation <Psi_T|L^_g|phi>/<Psi_T|phi> of every Cholesky one-body operator."""
    _check_sector(trial, det.n_orb, det.n_alpha, det.n_beta)
    lv = np.asarray(chol.vectors)
    if isinstance(trial, SingleDet):
        gu, gd = greens_function(trial.rotated_det, det)
        return np.einsum("gpq,qp->g", lv, gu + gd)
    ex, cs = _excitation_expansion_singles(det)
    ov = batch_overlap(trial, ex[0], ex[1])
    if abs(ov[0]) < 1e-300:
        raise OrthogonalWalkerError("vanishing trial overlap in force bias")
    ratio = ov / ov[0]
    out = np.zeros(lv.shape[0], dtype=complex)
    pos = 1
    for s, k in ((0, det.n_alpha), (1, det.n_beta)):
        c = cs[s]
        lrot = np.einsum("pa,gpq,qb->gab", c.conj(), lv, c, optimize=True)
        out += np.einsum("gii->g", lrot[:, :k, :k])
        n = det.n_orb
        for i in range(k):
            for a in range(k, n):
                out += lrot[:, a, i] * ratio[pos]
                pos += 1
    return out


def _excitation_expansion_singles(det: SlaterDeterminant):
    qdet, _ = orthonormalize(det)
    cs = [_complete_basis(qdet.up), _complete_basis(qdet.dn)]
    ks = [det.n_alpha, det.n_beta]
    base = [cs[0][:, :ks[0]], cs[1][:, :ks[1]]]
    ups, dns = [base[0]], [base[1]]
    for s in (0, 1):
        for i in range(ks[s]):
            for a in range(ks[s], det.n_orb):
                blocks = [base[0].copy(), base[1].copy()]
                blocks[s][:, i] = cs[s][:, a]
                ups.append(blocks[0])
                dns.append(blocks[1])
    return (np.array(ups), np.array(dns)), cs


# --- fast sector evaluator -------------------------------------------------------------

class SectorEvaluator:
    """Vectorized overlap, local energy and force bias for many walkers at once.

    Works for any trial through its sector vector: the walker's configuration
    amplitudes are products of row minors, and <Psi_T|O|phi> = (O Psi_T)^dag c_phi for
    Hermitian O.
    """

    def __init__(self, trial: TrialWavefunction, ham: Hamiltonian, chol: CholeskyFactors | None = None):
        self.trial = trial
        self.basis = trial.basis
        self.psi = np.asarray(trial.sector_vector, dtype=complex)
        op = SectorHamiltonian(ham, self.basis)
        self.hpsi = op.matvec(self.psi)
        self.chol = chol
        if chol is not None:
            lv = np.asarray(chol.vectors)
            self.lpsi = np.array([self.basis.apply_onebody(l, l, self.psi) for l in lv])
        else:
            self.lpsi = None
        b = self.basis
        self._psi2 = self.psi.reshape(b.dim_alpha, b.dim_beta).conj()
        self._hpsi2 = self.hpsi.reshape(b.dim_alpha, b.dim_beta).conj()

    def amplitudes(self, ups: np.ndarray, dns: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        b = self.basis
        return string_minors(ups, b.strings_alpha), string_minors(dns, b.strings_beta)

    def overlap(self, ups, dns) -> np.ndarray:
        ca, cb = self.amplitudes(ups, dns)
        return np.einsum("wa,ab,wb->w", ca, self._psi2, cb)

    def evaluate(self, ups, dns, need_energy: bool = True, need_bias: bool = True):
        """Returns (overlap, local_energy or None, force_bias or None) per walker."""
        b = self.basis
        ca, cb = self.amplitudes(ups, dns)
        c = (ca[:, :, None] * cb[:, None, :]).reshape(ca.shape[0], -1)
        ov = c @ self.psi.conj()
        e = fb = None
        with np.errstate(divide="ignore", invalid="ignore"):
            if need_energy:
                e = (c @ self.hpsi.conj()) / ov
            if need_bias and self.lpsi is not None:
                fb = (c @ self.lpsi.conj().T) / ov[:, None]
        return ov, e, fb


class GreensEvaluator:
    """Batched single-determinant evaluator based on mixed Green's functions."""

    def __init__(self, trial: SingleDet, ham: Hamiltonian, chol: CholeskyFactors | None = None):
        t = trial.rotated_det
        self.tu_h = t.up.conj().T
        self.td_h = t.dn.conj().T
        self.h1 = np.asarray(ham.h1)
        self.e_core = ham.e_core
        self.lv = None if chol is None else np.asarray(chol.vectors)

    def _green(self, blk, t_h):
        if blk.shape[-1] == 0:
            n = blk.shape[-2]
            return np.ones(blk.shape[0], dtype=complex), np.zeros(blk.shape[:-2] + (n, n), dtype=complex)
        o = t_h @ blk
        det = np.linalg.det(o)
        with np.errstate(all="ignore"):
            g = blk @ np.linalg.solve(o, np.broadcast_to(t_h, o.shape[:-2] + t_h.shape))
        return det, g

    def overlap(self, ups, dns) -> np.ndarray:
        du = np.linalg.det(self.tu_h @ ups) if ups.shape[-1] else 1.0
        dd = np.linalg.det(self.td_h @ dns) if dns.shape[-1] else 1.0
        return du * dd

    def evaluate(self, ups, dns, need_energy: bool = True, need_bias: bool = True):
        du, gu = self._green(ups, self.tu_h)
        dd, gd = self._green(dns, self.td_h)
        ov = du * dd
        gt = gu + gd
        e = fb = None
        if need_bias and self.lv is not None:
            fb = np.einsum("gpq,wqp->wg", self.lv, gt, optimize=True)
        if need_energy:
            e = self.e_core + np.einsum("pq,wqp->w", self.h1, gt, optimize=True)
            if self.lv is not None:
                tr = fb if fb is not None else np.einsum("gpq,wqp->wg", self.lv, gt, optimize=True)
                ex = 0.0
                for g in (gu, gd):
                    lg = np.einsum("gpq,wqr->wgpr", self.lv, g, optimize=True)
                    ex = ex + np.einsum("wgpr,wgrp->w", lg, lg, optimize=True)
                e = e + 0.5 * (np.sum(tr**2, axis=1) - ex)
        return ov, e, fb


def make_evaluator(trial: TrialWavefunction, ham: Hamiltonian, chol: CholeskyFactors | None = None):
    """Green's-function evaluator for single determinants, sector evaluator otherwise."""
    if isinstance(trial, SingleDet):
        from .hamio import cholesky_factorize
        return GreensEvaluator(trial, ham, chol if chol is not None else cholesky_factorize(ham))
    return SectorEvaluator(trial, ham, chol)


# --- PP optimization -------------------------------------------------------------------

class _SectorAnsatz:
    """Sector-space realization of a CircuitTrialSpec with analytic gradients."""

    def __init__(self, spec: CircuitTrialSpec):
        self.spec = spec
        n = spec.n_orb
        self.basis = b = SectorBasis(n, spec.n_alpha, spec.n_beta)
        ia = sp.identity(b.dim_alpha, format="csr")
        ib = sp.identity(b.dim_beta, format="csr")
        self._ia, self._ib = ia, ib
        bits = np.zeros((b.dim, 2 * n), dtype=bool)
        for c, (sa, sb) in enumerate(b.configs()):
            bits[c, list(sa)] = True
            bits[c, [n + p for p in sb]] = True
        self._bits = bits
        # PP amplitudes: which configurations are reachable, and which pair is virtual
        idx, sign = _gather_signs(spec, b)
        self._pp_terms = []
        for choice in range(2**spec.n_pairs):
            occ = set()
            for k, (i, a) in enumerate(spec.pairing):
                o = a if (choice >> k) & 1 else i
                occ.add(o)
            c = b.index(sorted(occ), sorted(occ))
            self._pp_terms.append((c, choice, sign[c]))
        self.generators = []
        for layer in spec.layers:
            for a, c in layer.pairs:
                self.generators.append(self._layer_generator(layer.kind, a, c))
        if spec.rotation_angles is not None:
            for p, q in _orbital_pairs(n):
                self.generators.append(("rot", self._hop_matrix(0, p, q), self._hop_matrix(1, p, q)))

    def _hop_matrix(self, spin: int, p: int, q: int) -> sp.csr_matrix:
        b = self.basis
        e = b.excitation(spin, p, q) - b.excitation(spin, q, p)
        if spin == 0:
            return sp.kron(e, self._ib, format="csr")
        return sp.kron(self._ia, e, format="csr")

    def _layer_generator(self, kind: str, a: int, c: int):
        n = self.spec.n_orb
        if kind == "density":
            return ("diag", (self._bits[:, a] & self._bits[:, c]).astype(float))
        spin = 0 if a < n else 1
        return ("hop", self._hop_matrix(spin, a % n, c % n))

    def pp_vector(self, thetas) -> tuple[np.ndarray, list[np.ndarray]]:
        v = np.zeros(self.basis.dim, dtype=complex)
        grads = [np.zeros(self.basis.dim, dtype=complex) for _ in thetas]
        for c, choice, s in self._pp_terms:
            f = [np.sin(t) if (choice >> k) & 1 else np.cos(t) for k, t in enumerate(thetas)]
            df = [np.cos(t) if (choice >> k) & 1 else -np.sin(t) for k, t in enumerate(thetas)]
            v[c] += s * np.prod(f)
            for k in range(len(thetas)):
                g = list(f)
                g[k] = df[k]
                grads[k][c] += s * np.prod(g)
        return v, grads

    @staticmethod
    def _apply_exp(gen, theta, v, sign=1.0):
        kind = gen[0]
        t = sign * theta
        if kind == "diag":
            return np.exp(1j * t * gen[1]) * v
        if kind == "hop":
            k = gen[1]
            kv = k @ v
            return v + np.sin(t) * kv + (1 - np.cos(t)) * (k @ kv)
        for k in gen[1:]:
            kv = k @ v
            v = v + np.sin(t) * kv + (1 - np.cos(t)) * (k @ kv)
        return v

    @staticmethod
    def _apply_gen(gen, v):
        if gen[0] == "diag":
            return 1j * gen[1] * v
        out = gen[1] @ v
        for k in gen[2:]:
            out = out + k @ v
        return out

    def state(self, params) -> np.ndarray:
        k = self.spec.n_pairs
        v, _ = self.pp_vector(params[:k])
        for gen, t in zip(self.generators, params[k:]):
            v = self._apply_exp(gen, t, v)
        return v

    def energy_and_gradient(self, params, hop_op) -> tuple[float, np.ndarray]:
        k = self.spec.n_pairs
        v0, dv0 = self.pp_vector(params[:k])
        v = v0
        for gen, t in zip(self.generators, params[k:]):
            v = self._apply_exp(gen, t, v)
        lam = hop_op(v)
        e = float(np.vdot(v, lam).real)
        grad = np.zeros(len(params))
        for idx in range(len(self.generators) - 1, -1, -1):
            gen, t = self.generators[idx], params[k + idx]
            grad[k + idx] = 2.0 * np.vdot(lam, self._apply_gen(gen, v)).real
            v = self._apply_exp(gen, t, v, sign=-1.0)
            lam = self._apply_exp(gen, t, lam, sign=-1.0)
        for i in range(k):
            grad[i] = 2.0 * np.vdot(lam, dv0[i]).real
        return e, grad


@dataclass(frozen=True)
class OptimizationResult:
    spec: CircuitTrialSpec
    energy: float
    gradient_norm: float
    n_iterations: int
    converged: bool


def optimize_pp(ham: Hamiltonian, template: CircuitTrialSpec, max_iter: int = 2000, gtol: float = 1e-7,
                restarts: int = 1, jitter: float = 0.0, seed: int = 0) -> OptimizationResult:
    """Minimize the Rayleigh quotient of the ansatz (after offline rotation) by BFGS.

    The all-zero layer start is a stationary point, so ``jitter`` adds a seeded normal
    perturbation to the template parameters; with ``restarts`` > 1 the lowest of that
    many independently perturbed starts is kept.
    """
    if (template.n_orb, template.n_alpha, template.n_beta) != (ham.n_orb, ham.n_alpha, ham.n_beta):
        raise ValueError("template sector does not match the Hamiltonian")
    ansatz = _SectorAnsatz(template)
    op = SectorHamiltonian(ham, ansatz.basis)
    hop_op = op.matvec
    base = template.parameters()
    fun = lambda x: ansatz.energy_and_gradient(x, hop_op)
    if max_iter <= 0:
        e, g = fun(base)
        return OptimizationResult(template, e, float(np.linalg.norm(g)), 0, False)
    best = None
    for r in range(max(1, restarts)):
        x0 = base.copy()
        if jitter > 0:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), r])))
            x0 = x0 + jitter * rng.standard_normal(x0.size)
        res = scipy.optimize.minimize(fun, x0, jac=True, method="BFGS",
                                      options={"maxiter": max_iter, "gtol": gtol})
        if best is None or res.fun < best.fun:
            best = res
    e, g = fun(best.x)
    gnorm = float(np.linalg.norm(g))
    converged = gnorm <= 1e-6
    if not converged:
        warnings.warn(f"optimize_pp stopped with gradient norm {gnorm:.2e}", RuntimeWarning)
    return OptimizationResult(template.with_parameters(best.x), e, gnorm, int(best.nit), converged)


def ansatz_energy(ham: Hamiltonian, spec: CircuitTrialSpec) -> float:
    """Rayleigh quotient of the circuit trial including its offline rotation."""
    from .oracle import variational_energy_exact
    return variational_energy_exact(ham, circuit_trial(spec).sector_vector)


def read_circuit_spec(path) -> CircuitTrialSpec:
    return CircuitTrialSpec.from_json(Path(path).read_text())


def write_circuit_spec(spec: CircuitTrialSpec, path) -> None:
    Path(path).write_text(spec.to_json() + "\n")
