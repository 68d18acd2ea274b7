"""Exact references in the fixed-particle-number configuration basis."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from math import comb

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .hamio import Hamiltonian

MAX_SECTOR_DIM = 10**6
DENSE_LIMIT = 2500


class SectorTooLargeError(ValueError):
    pass


class StagnationError(RuntimeError):
    pass


def _string_tables(n: int, k: int):
    strings = list(combinations(range(n), k))
    index = {s: i for i, s in enumerate(strings)}
    ops = [[None] * n for _ in range(n)]
    for p in range(n):
        for q in range(n):
            rows, cols, vals = [], [], []
            for j, s in enumerate(strings):
                if q not in s:
                    continue
                if p != q and p in s:
                    continue
                new = sorted(set(s) - {q} | {p})
                lo, hi = min(p, q), max(p, q)
                between = sum(1 for o in s if lo < o < hi)
                rows.append(index[tuple(new)])
                cols.append(j)
                vals.append(-1.0 if between % 2 else 1.0)
            ops[p][q] = sp.csr_matrix((vals, (rows, cols)), shape=(len(strings), len(strings)))
    return strings, index, ops


@dataclass(frozen=True)
class SectorBasis:
    """Configurations with fixed (n_alpha, n_beta), ordered alpha-major.

    Each spin's occupied-orbital tuples are enumerated in lexicographic order;
    configuration index = i_alpha * dim_beta + i_beta.
    """

    n_orb: int
    n_alpha: int
    n_beta: int

    def __post_init__(self):
        if self.dim > MAX_SECTOR_DIM:
            raise SectorTooLargeError(f"sector dimension {self.dim} exceeds {MAX_SECTOR_DIM}")

    @property
    def dim_alpha(self) -> int:
        return comb(self.n_orb, self.n_alpha)

    @property
    def dim_beta(self) -> int:
        return comb(self.n_orb, self.n_beta)

    @property
    def dim(self) -> int:
        return self.dim_alpha * self.dim_beta

    @cached_property
    def _alpha(self):
        return _string_tables(self.n_orb, self.n_alpha)

    @cached_property
    def _beta(self):
        if self.n_beta == self.n_alpha:
            return self._alpha
        return _string_tables(self.n_orb, self.n_beta)

    @property
    def strings_alpha(self) -> list[tuple[int, ...]]:
        return self._alpha[0]

    @property
    def strings_beta(self) -> list[tuple[int, ...]]:
        return self._beta[0]

    def index(self, occ_up, occ_dn) -> int:
        return self._alpha[1][tuple(sorted(occ_up))] * self.dim_beta + self._beta[1][tuple(sorted(occ_dn))]

    def config(self, i: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        ia, ib = divmod(i, self.dim_beta)
        return self.strings_alpha[ia], self.strings_beta[ib]

    def configs(self):
        for sa in self.strings_alpha:
            for sb in self.strings_beta:
                yield sa, sb

    def bits(self, i: int) -> tuple[str, str]:
        sa, sb = self.config(i)
        return (
            "".join("1" if p in sa else "0" for p in range(self.n_orb)),
            "".join("1" if p in sb else "0" for p in range(self.n_orb)),
        )

    @cached_property
    def qubit_indices(self) -> np.ndarray:
        """Statevector index of every configuration on 2*n_orb qubits (qubit 0 is the MSB).

        Qubits 0..n_orb-1 hold the up-spin orbitals, n_orb..2n_orb-1 the down-spin ones.
        """
        n = self.n_orb
        out = np.empty(self.dim, dtype=np.int64)
        for i, (sa, sb) in enumerate(self.configs()):
            v = 0
            for p in sa:
                v |= 1 << (2 * n - 1 - p)
            for p in sb:
                v |= 1 << (n - 1 - p)
            out[i] = v
        return out

    # one-body operators --------------------------------------------------------

    def excitation(self, spin: int, p: int, q: int) -> sp.csr_matrix:
        """Sparse a^+_p a_q for one spin species, acting on that species' strings."""
        return (self._alpha if spin == 0 else self._beta)[2][p][q]

    def apply_onebody(self, m_up: np.ndarray, m_dn: np.ndarray, vec: np.ndarray) -> np.ndarray:
        """Apply sum_pq m_up[p,q] a^+_{p up} a_{q up} + (same for down) to ``vec`` (dim[, k])."""
        da, db = self.dim_alpha, self.dim_beta
        v = np.asarray(vec)
        extra = v.shape[1:]
        c = v.reshape(da, db, -1)
        out = np.zeros(c.shape, dtype=np.result_type(c, m_up, m_dn))
        ca = c.reshape(da, -1)
        cb = c.transpose(1, 0, 2).reshape(db, -1)
        for p in range(self.n_orb):
            for q in range(self.n_orb):
                if m_up[p, q] != 0 and self.n_alpha:
                    out += m_up[p, q] * (self.excitation(0, p, q) @ ca).reshape(c.shape)
                if m_dn[p, q] != 0 and self.n_beta:
                    out += m_dn[p, q] * (self.excitation(1, p, q) @ cb).reshape(db, da, -1).transpose(1, 0, 2)
        return out.reshape((self.dim,) + extra)

    def onebody_matrix(self, m_up: np.ndarray, m_dn: np.ndarray) -> np.ndarray:
        return self.apply_onebody(m_up, m_dn, np.eye(self.dim))

    def orbital_rotation_matrix(self, r_up: np.ndarray, r_dn: np.ndarray) -> np.ndarray:
        """Matrix of the orbital rotation a^+_q -> sum_p r[p,q] a^+_p on this sector."""
        ca = _compound(r_up, self.strings_alpha)
        cb = _compound(r_dn, self.strings_beta)
        return np.kron(ca, cb)

    def rotate_vector(self, r_up: np.ndarray, r_dn: np.ndarray, vec: np.ndarray) -> np.ndarray:
        ca = _compound(r_up, self.strings_alpha)
        cb = _compound(r_dn, self.strings_beta)
        c = np.asarray(vec).reshape(self.dim_alpha, self.dim_beta)
        return (ca @ c @ cb.T).reshape(-1)


def _compound(r: np.ndarray, strings) -> np.ndarray:
    if not strings or not strings[0]:
        return np.ones((1, 1), dtype=r.dtype)
    idx = np.asarray(strings)
    sub = r[idx[:, None, :, None], idx[None, :, None, :]]
    return np.linalg.det(sub)


class SectorHamiltonian:
    """Matrix-free sector Hamiltonian built from integrals via excitation operators."""

    def __init__(self, ham: Hamiltonian, basis: SectorBasis | None = None):
        self.ham = ham
        self.basis = basis or SectorBasis(ham.n_orb, ham.n_alpha, ham.n_beta)
        n = ham.n_orb
        self._k = ham.h1 - 0.5 * np.einsum("pqqs->ps", ham.eri)
        self._v = ham.eri.reshape(n * n, n * n)

    @property
    def dim(self) -> int:
        return self.basis.dim

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        b = self.basis
        n = self.ham.n_orb
        v = np.asarray(vec)
        single = v.ndim == 1
        v2 = v.reshape(b.dim, -1)
        out = self.ham.e_core * v2 + b.apply_onebody(self._k, self._k, v2)
        # D[rs] = E_rs v ; T[pq] = sum_rs (pq|rs) D[rs] ; out += 1/2 sum_pq E_pq T[pq]
        d = np.empty((n * n,) + v2.shape, dtype=np.result_type(v2, float))
        for r in range(n):
            for s in range(n):
                e = np.zeros((n, n))
                e[r, s] = 1.0
                d[r * n + s] = b.apply_onebody(e, e, v2)
        t = np.tensordot(self._v, d, axes=(1, 0))
        for p in range(n):
            for q in range(n):
                e = np.zeros((n, n))
                e[p, q] = 0.5
                out = out + b.apply_onebody(e, e, t[p * n + q])
        return out[:, 0] if single else out

    def to_dense(self) -> np.ndarray:
        if self.dim > DENSE_LIMIT * 4:
            raise SectorTooLargeError(f"refusing to densify a {self.dim}-dimensional sector")
        return self.matvec(np.eye(self.dim))

    @cached_property
    def dense(self) -> np.ndarray:
        h = self.to_dense()
        return 0.5 * (h + h.T)

    def as_linear_operator(self) -> spla.LinearOperator:
        return spla.LinearOperator((self.dim, self.dim), matvec=self.matvec, matmat=self.matvec, dtype=float)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return v * (np.abs(v[i]) / v[i])


def fci_solve(ham: Hamiltonian, basis: SectorBasis | None = None) -> tuple[float, np.ndarray]:
    """Lowest eigenpair of the sector Hamiltonian (vector normalized, largest entry positive)."""
    op = SectorHamiltonian(ham, basis)
    if op.dim <= DENSE_LIMIT:
        w, v = np.linalg.eigh(op.dense)
        e0, vec = float(w[0]), v[:, 0]
    else:
        w, v = spla.eigsh(op.as_linear_operator(), k=1, which="SA", tol=1e-12)
        e0, vec = float(w[0]), v[:, 0]
    vec = _fix_sign(vec / np.linalg.norm(vec))
    resid = np.linalg.norm(op.matvec(vec) - e0 * vec)
    if resid > 1e-8:
        raise RuntimeError(f"FCI residual {resid:.2e} above 1e-8")
    return e0, np.real_if_close(vec)


def variational_energy_exact(ham: Hamiltonian, vector: np.ndarray, basis: SectorBasis | None = None) -> float:
    v = np.asarray(vector)
    nrm = np.vdot(v, v).real
    if nrm == 0.0:
        raise ValueError("zero vector has no Rayleigh quotient")
    op = SectorHamiltonian(ham, basis)
    return float(np.vdot(v, op.matvec(v)).real / nrm)


def imaginary_time_exact(ham: Hamiltonian, psi0: np.ndarray, dt: float, n_steps: int,
                         basis: SectorBasis | None = None) -> np.ndarray:
    """Rayleigh-quotient trajectory of exp(-k dt H) psi0 for k = 0..n_steps."""
    op = SectorHamiltonian(ham, basis)
    v = np.asarray(psi0, dtype=complex)
    v = v / np.linalg.norm(v)
    if op.dim <= DENSE_LIMIT:
        w, u = np.linalg.eigh(op.dense)
        coef = u.T @ v
        if abs(coef[0]) < 1e-12:
            raise StagnationError("initial vector has no overlap with the ground state")
        energies = []
        for k in range(n_steps + 1):
            c = coef * np.exp(-k * dt * (w - w[0]))
            p = np.abs(c) ** 2
            energies.append(float(np.sum(p * w) / np.sum(p)))
        return np.array(energies)
    e0, g = fci_solve(ham, op.basis)
    if abs(np.vdot(g, v)) < 1e-12:
        raise StagnationError("initial vector has no overlap with the ground state")
    a = -dt * op.as_linear_operator()
    energies = [float(np.vdot(v, op.matvec(v)).real)]
    for _ in range(n_steps):
        v = spla.expm_multiply(a, v)
        v /= np.linalg.norm(v)
        energies.append(float(np.vdot(v, op.matvec(v)).real))
    return np.array(energies)


def dense_propagator(ham: Hamiltonian, dt: float) -> np.ndarray:
    op = SectorHamiltonian(ham)
    return scipy.linalg.expm(-dt * op.dense)
