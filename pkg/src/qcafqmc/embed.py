"""Active-space trial queries for full-space walkers.

The full-space trial is psi_T (active) with the core orbitals filled by ``core_det``
and the virtual orbitals empty. Per spin, an active determinant with block A maps to
the full-space determinant whose columns are the core columns first, then A placed
on the active rows. A walker block Phi then satisfies

    <phi | psi_T (x) core (x) 0_v> = constant * <phi_active | psi_T>

with constant = det(W), W = [K | K_perp], K = Phi_core^dag Psi_core, and phi_active
the (conjugate transposed) trailing rows of W^-1 Phi_active^dag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hamio import Hamiltonian
from .oracle import SectorBasis
from .slater import OrthogonalWalkerError, SlaterDeterminant, string_minors
from .trial import TrialWavefunction, batch_overlap, local_energy


class CoreAnnihilationError(OrthogonalWalkerError):
    """The walker has no component with the core fully occupied."""


@dataclass(frozen=True)
class SpacePartition:
    """Spatial-orbital lists; each spatial orbital carries one up and one down spin orbital."""

    active: tuple[int, ...]
    core: tuple[int, ...] = ()
    virtual: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("active", "core", "virtual"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        allv = self.active + self.core + self.virtual
        if len(set(allv)) != len(allv):
            raise ValueError("active, core and virtual orbital lists must be disjoint")
        if sorted(allv) != list(range(len(allv))):
            raise ValueError("partition must cover orbitals 0..n-1 exactly once")
        if not self.active:
            raise ValueError("active space is empty")

    @property
    def n_orb(self) -> int:
        return len(self.active) + len(self.core) + len(self.virtual)

    @property
    def n_active_spin_orbitals(self) -> int:
        return 2 * len(self.active)

    def validate(self, n_orb: int) -> None:
        if self.n_orb != n_orb:
            raise ValueError(f"partition covers {self.n_orb} orbitals, Hamiltonian has {n_orb}")


def core_determinant(part: SpacePartition, n_core_alpha: int | None = None,
                     n_core_beta: int | None = None) -> SlaterDeterminant:
    """Core block per spin: identity on the core orbitals (rows ordered as ``part.core``)."""
    nc = len(part.core)
    na = nc if n_core_alpha is None else n_core_alpha
    nb = nc if n_core_beta is None else n_core_beta
    if na != nc or nb != nc:
        raise ValueError("core orbitals must be fully occupied in both spins")
    return SlaterDeterminant(np.eye(nc), np.eye(nc))


def _project_block(phi: np.ndarray, psi_core: np.ndarray, part: SpacePartition):
    core = list(part.core)
    act = list(part.active)
    k = phi.shape[1]
    nc = len(core)
    a = phi[act, :].conj().T  # (k, n_a)
    if nc == 0:
        return 1.0 + 0.0j, a.conj().T.copy()
    if k < nc:
        raise ValueError("fewer electrons than core orbitals")
    kmat = phi[core, :].conj().T @ psi_core  # (k, n_c)
    # orthonormal complement of range(K) via a full QR
    q, r = np.linalg.qr(kmat, mode="complete")
    diag = np.abs(np.diagonal(r[:nc, :nc]))
    if diag.size and diag.min() <= 1e-13 * max(1.0, np.abs(kmat).max()):
        return 0.0 + 0.0j, np.zeros((len(act), k - nc), dtype=complex)
    w = np.concatenate([kmat, q[:, nc:]], axis=1)
    const = np.linalg.det(w)
    tail = np.linalg.solve(w, a)[nc:, :]  # (k - n_c, n_a)
    return complex(const), tail.conj().T


def project_determinant(phi: SlaterDeterminant, core_det: SlaterDeterminant,
                        part: SpacePartition) -> tuple[complex, SlaterDeterminant]:
    """(constant, phi_active); constant is 0 when the core projection annihilates phi."""
    part.validate(phi.n_orb)
    cu, au = _project_block(phi.up, core_det.up, part)
    cd, ad = _project_block(phi.dn, core_det.dn, part)
    return cu * cd, SlaterDeterminant(au, ad)


def embedded_overlap(trial_active: TrialWavefunction, phi: SlaterDeterminant, core_det: SlaterDeterminant,
                     part: SpacePartition) -> complex:
    """<Psi_T(full)|phi> in the trial_overlap convention (conjugate of the projection identity)."""
    c, pa = project_determinant(phi, core_det, part)
    if c == 0:
        return 0.0 + 0.0j
    # trial_overlap is <Psi_T|phi~>; the identity gives <phi|Psi_full> = c <phi~|Psi_T>
    return complex(np.conj(c) * batch_overlap(trial_active, pa.up[None], pa.dn[None])[0])


def _embedded_overlaps(trial_active, core_det, part):
    def fn(ups, dns):
        out = np.empty(ups.shape[0], dtype=complex)
        for i, (u, d) in enumerate(zip(ups, dns)):
            out[i] = embedded_overlap(trial_active, SlaterDeterminant(u, d), core_det, part)
        return out
    return fn


def embedded_local_energy(trial_active: TrialWavefunction, ham_full: Hamiltonian, phi: SlaterDeterminant,
                          core_det: SlaterDeterminant, part: SpacePartition) -> complex:
    """Full-space local energy with every excited-determinant overlap taken through the projection."""
    part.validate(ham_full.n_orb)
    return local_energy(trial_active, ham_full, phi, overlap_fn=_embedded_overlaps(trial_active, core_det, part))


def embed_vector(vec_active: np.ndarray, basis_active: SectorBasis, core_det: SlaterDeterminant,
                 part: SpacePartition) -> tuple[SectorBasis, np.ndarray]:
    """Full-space sector vector of psi_T (x) core (x) 0_v (configuration-sum oracle)."""
    nc = len(part.core)
    full = SectorBasis(part.n_orb, basis_active.n_alpha + nc, basis_active.n_beta + nc)
    out = np.zeros(full.dim, dtype=complex)
    act = list(part.active)
    core = list(part.core)
    dets = [np.linalg.det(core_det.up) if nc else 1.0, np.linalg.det(core_det.dn) if nc else 1.0]
    for i, (sa, sb) in enumerate(basis_active.configs()):
        amp = vec_active[i]
        if amp == 0:
            continue
        occ = []
        sign = 1.0
        for s, loc in enumerate((sa, sb)):
            modes = core + [act[p] for p in loc]
            sign *= _perm_sign(modes) * dets[s]
            occ.append(sorted(modes))
        out[full.index(occ[0], occ[1])] += sign * amp
    return full, out


def _perm_sign(seq: Sequence[int]) -> float:
    seq = list(seq)
    inv = sum(1 for i in range(len(seq)) for j in range(i + 1, len(seq)) if seq[i] > seq[j])
    return -1.0 if inv % 2 else 1.0


def full_space_overlap(vec_full: np.ndarray, basis_full: SectorBasis, phi: SlaterDeterminant) -> complex:
    """<Psi|phi> by brute-force configuration sum."""
    c = np.outer(string_minors(phi.up, basis_full.strings_alpha), string_minors(phi.dn, basis_full.strings_beta))
    return complex(np.vdot(vec_full, c.reshape(-1)))
