"""Slater determinant algebra in spin-blocked storage.

Convention (shared by every module): a determinant with blocks ``up`` (n_orb x n_alpha)
and ``dn`` (n_orb x n_beta) is the state

    prod_i (sum_p up[p, i] a^+_{p,up}) prod_j (sum_p dn[p, j] a^+_{p,dn}) |vac>

and its amplitude on a configuration is the product of the row minors taken in
ascending orbital order. See docs/conventions.md.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg


class OrthogonalWalkerError(ArithmeticError):
    """Walker has (numerically) zero overlap with the trial."""


@dataclass(frozen=True)
class SlaterDeterminant:
    up: np.ndarray
    dn: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "up", np.asarray(self.up, dtype=complex))
        object.__setattr__(self, "dn", np.asarray(self.dn, dtype=complex))
        if self.up.ndim != 2 or self.dn.ndim != 2 or self.up.shape[0] != self.dn.shape[0]:
            raise ValueError(f"incompatible blocks {self.up.shape} and {self.dn.shape}")

    @property
    def n_orb(self) -> int:
        return self.up.shape[0]

    @property
    def n_alpha(self) -> int:
        return self.up.shape[1]

    @property
    def n_beta(self) -> int:
        return self.dn.shape[1]

    @property
    def blocks(self) -> tuple[np.ndarray, np.ndarray]:
        return self.up, self.dn

    @classmethod
    def from_occupations(cls, n_orb: int, occ_up: Sequence[int], occ_dn: Sequence[int]) -> "SlaterDeterminant":
        eye = np.eye(n_orb)
        return cls(eye[:, sorted(occ_up)], eye[:, sorted(occ_dn)])

    @classmethod
    def random(cls, n_orb: int, n_alpha: int, n_beta: int, rng: np.random.Generator,
               complex_valued: bool = True) -> "SlaterDeterminant":
        def block(k):
            m = rng.normal(size=(n_orb, k))
            if complex_valued:
                m = m + 1j * rng.normal(size=(n_orb, k))
            return m
        return cls(block(n_alpha), block(n_beta))


@dataclass
class Walker:
    """Mutable walker state; owned by one propagation task at a time."""

    det: SlaterDeterminant
    weight: float = 1.0
    overlap_cache: complex = 1.0
    log_scale: complex = 0.0


def _check_pair(bra: SlaterDeterminant, ket: SlaterDeterminant) -> None:
    if bra.up.shape != ket.up.shape or bra.dn.shape != ket.dn.shape:
        raise ValueError(f"shape mismatch: {bra.up.shape}/{bra.dn.shape} vs {ket.up.shape}/{ket.dn.shape}")


def overlap(bra: SlaterDeterminant, ket: SlaterDeterminant) -> complex:
    """<bra|ket> = det(bra_up^H ket_up) det(bra_dn^H ket_dn)."""
    _check_pair(bra, ket)
    o = 1.0 + 0.0j
    for b, k in zip(bra.blocks, ket.blocks):
        if b.shape[1]:
            o *= np.linalg.det(b.conj().T @ k)
    return complex(o)


def greens_function(trial_det: SlaterDeterminant, walker_det: SlaterDeterminant) -> tuple[np.ndarray, np.ndarray]:
    """Per-spin mixed Green's function G = W (T^H W)^-1 T^H.

    ``G[q, p] = <T| a^+_p a_q |W> / <T|W>``.
    """
    _check_pair(trial_det, walker_det)
    out = []
    for t, w in zip(trial_det.blocks, walker_det.blocks):
        if t.shape[1] == 0:
            out.append(np.zeros((t.shape[0], t.shape[0]), dtype=complex))
            continue
        o = t.conj().T @ w
        if np.linalg.cond(o) > 1e14:
            raise OrthogonalWalkerError("walker orthogonal to trial")
        out.append(w @ np.linalg.solve(o, t.conj().T))
    return out[0], out[1]


def _is_normal(a: np.ndarray, tol: float = 1e-12) -> bool:
    return np.max(np.abs(a @ a.conj().T - a.conj().T @ a), initial=0.0) <= tol * max(1.0, np.max(np.abs(a)) ** 2)


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential: eigendecomposition for normal matrices, scaling-and-squaring otherwise."""
    a = np.asarray(a)
    if not a.any():
        return np.eye(a.shape[0], dtype=a.dtype)
    if np.allclose(a, a.conj().T, atol=1e-14, rtol=0):
        w, v = np.linalg.eigh(a)
        return (v * np.exp(w)) @ v.conj().T
    if _is_normal(a):
        # Schur form of a normal matrix is diagonal with a unitary Schur basis.
        t, z = scipy.linalg.schur(a.astype(complex), output="complex")
        return (z * np.exp(np.diag(t))) @ z.conj().T
    return scipy.linalg.expm(a)


def apply_exp_onebody(det: SlaterDeterminant, a_up: np.ndarray, a_dn: np.ndarray) -> SlaterDeterminant:
    n = det.n_orb
    for a in (a_up, a_dn):
        if np.shape(a) != (n, n):
            raise ValueError(f"one-body matrix must be {n}x{n}, got {np.shape(a)}")
    return SlaterDeterminant(expm(a_up) @ det.up, expm(a_dn) @ det.dn)


def orthonormalize(det: SlaterDeterminant) -> tuple[SlaterDeterminant, complex]:
    """QR per block with real-positive R diagonal.

    Returns ``(new, log_factor)`` with ``overlap(bra, det) == exp(log_factor) * overlap(bra, new)``.
    """
    blocks = []
    log_factor = 0.0 + 0.0j
    for b in det.blocks:
        if b.shape[1] == 0:
            blocks.append(b)
            continue
        q, r = np.linalg.qr(b)
        d = np.diag(r)
        if np.min(np.abs(d)) <= 1e-14 * max(1.0, np.max(np.abs(d))):
            raise np.linalg.LinAlgError("rank-deficient determinant block")
        phase = d / np.abs(d)
        q = q * phase
        log_factor += np.sum(np.log(np.abs(d)))
        blocks.append(q)
    # R = diag(phase)^-1 R', and the phases went into q, so det(R') is real positive.
    return SlaterDeterminant(blocks[0], blocks[1]), complex(log_factor)


def bits_to_occ(bits: Sequence[int] | int, n_orb: int | None = None) -> list[int]:
    if isinstance(bits, (int, np.integer)):
        if n_orb is None:
            raise ValueError("n_orb required for integer occupations")
        return [p for p in range(n_orb) if (int(bits) >> (n_orb - 1 - p)) & 1]
    return [p for p, b in enumerate(bits) if int(b)]


def det_amplitude(det: SlaterDeterminant, occupation: tuple) -> complex:
    """Amplitude of ``det`` on the configuration given as (bits_up, bits_dn).

    Each entry may be a 0/1 sequence indexed by orbital or an explicit list of
    occupied orbitals wrapped in a tuple ``("occ", [...])``.
    """
    occ_up, occ_dn = (_as_occ(o, det.n_orb) for o in occupation)
    if len(occ_up) != det.n_alpha or len(occ_dn) != det.n_beta:
        raise ValueError(
            f"occupation has Hamming weights ({len(occ_up)}, {len(occ_dn)}), "
            f"expected ({det.n_alpha}, {det.n_beta})"
        )
    amp = 1.0 + 0.0j
    for block, occ in ((det.up, occ_up), (det.dn, occ_dn)):
        if occ:
            amp *= np.linalg.det(block[sorted(occ), :])
    return complex(amp)


def _as_occ(o, n_orb: int) -> list[int]:
    if isinstance(o, tuple) and len(o) == 2 and o[0] == "occ":
        return sorted(o[1])
    if isinstance(o, str):
        return [p for p, c in enumerate(o) if c == "1"]
    bits = list(o)
    if len(bits) != n_orb:
        raise ValueError(f"occupation bitstring has length {len(bits)}, expected {n_orb}")
    return [p for p, b in enumerate(bits) if int(b)]


def string_minors(block: np.ndarray, strings: Sequence[Sequence[int]]) -> np.ndarray:
    """Minors of ``block`` (..., n_orb, k) for every occupied-row tuple in ``strings``.

    Leading batch axes are preserved: output shape (..., len(strings)).
    """
    k = block.shape[-1]
    if k == 0:
        return np.ones(block.shape[:-2] + (len(strings),), dtype=block.dtype)
    idx = np.asarray(strings, dtype=int)
    sub = block[..., idx, :]  # (..., n_str, k, k)
    if k == 1:
        return sub[..., 0, 0]
    if k == 2:
        return sub[..., 0, 0] * sub[..., 1, 1] - sub[..., 0, 1] * sub[..., 1, 0]
    return np.linalg.det(sub)


def occupation_strings(n_orb: int, k: int) -> list[tuple[int, ...]]:
    return list(combinations(range(n_orb), k))


def read_slater(path: str | Path) -> SlaterDeterminant:
    """Read the ``SLATER v1`` text format (row-major complex entries as ``re im``)."""
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 5 or header[0] != "SLATER" or header[1] != "v1":
            raise ValueError(f"{path}: expected header 'SLATER v1 n_orb n_alpha n_beta'")
        n, na, nb = (int(x) for x in header[2:])
        vals = np.array(f.read().split(), dtype=float)
    need = 2 * n * (na + nb)
    if vals.size != need:
        raise ValueError(f"{path}: expected {need} numbers, found {vals.size}")
    z = vals[0::2] + 1j * vals[1::2]
    up = z[: n * na].reshape(n, na)
    dn = z[n * na:].reshape(n, nb)
    return SlaterDeterminant(up, dn)


def write_slater(det: SlaterDeterminant, path: str | Path) -> None:
    with open(path, "w") as f:
        f.write(f"SLATER v1 {det.n_orb} {det.n_alpha} {det.n_beta}\n")
        for block in det.blocks:
            for row in block:
                f.write(" ".join(f"{v.real:.17e} {v.imag:.17e}" for v in row) + "\n")
