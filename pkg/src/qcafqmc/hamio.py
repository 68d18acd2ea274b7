"""Electronic Hamiltonians: FCIDUMP ingestion, Cholesky factorization, frozen core."""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np


class FCIDumpError(ValueError):
    """Malformed FCIDUMP input; the message carries the offending line number."""


class NotPSDError(ValueError):
    pass


@dataclass(frozen=True)
class Hamiltonian:
    """Spin-free second-quantized Hamiltonian in an orthonormal orbital basis.

    ``eri`` is stored in chemists' notation, ``eri[p, q, r, s] = (pq|rs)``.
    """

    n_orb: int
    n_alpha: int
    n_beta: int
    e_core: float
    h1: np.ndarray
    eri: np.ndarray

    def __post_init__(self):
        if self.h1.shape != (self.n_orb, self.n_orb):
            raise ValueError(f"h1 has shape {self.h1.shape}, expected ({self.n_orb}, {self.n_orb})")
        if self.eri.shape != (self.n_orb,) * 4:
            raise ValueError(f"eri has shape {self.eri.shape}, expected {(self.n_orb,) * 4}")
        if self.n_alpha + self.n_beta > 2 * self.n_orb or min(self.n_alpha, self.n_beta) < 0:
            raise ValueError("electron counts incompatible with orbital count")
        self.h1.setflags(write=False)
        self.eri.setflags(write=False)

    @property
    def n_elec(self) -> int:
        return self.n_alpha + self.n_beta

    def check_symmetry(self, tol: float = 1e-12) -> bool:
        if np.max(np.abs(self.h1 - self.h1.T), initial=0.0) > tol:
            return False
        return all(np.max(np.abs(self.eri - p)) <= tol for p in _eri_permutations(self.eri))

    def rotated(self, u: np.ndarray) -> "Hamiltonian":
        """Integrals in the orbital basis whose columns are ``u`` (real orthogonal)."""
        h1 = u.T @ self.h1 @ u
        eri = np.einsum("pqrs,pi,qj,rk,sl->ijkl", self.eri, u, u, u, u, optimize=True)
        return Hamiltonian(self.n_orb, self.n_alpha, self.n_beta, self.e_core, h1, eri)


def _eri_permutations(eri: np.ndarray) -> list[np.ndarray]:
    return [
        eri.transpose(1, 0, 2, 3),
        eri.transpose(0, 1, 3, 2),
        eri.transpose(1, 0, 3, 2),
        eri.transpose(2, 3, 0, 1),
        eri.transpose(3, 2, 0, 1),
        eri.transpose(2, 3, 1, 0),
        eri.transpose(3, 2, 1, 0),
    ]


def _eri_orbit(p: int, q: int, r: int, s: int) -> set[tuple[int, int, int, int]]:
    return {
        (p, q, r, s), (q, p, r, s), (p, q, s, r), (q, p, s, r),
        (r, s, p, q), (s, r, p, q), (r, s, q, p), (s, r, q, p),
    }


_NAMELIST_ITEM = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=\s*([^=]*?)(?=,?\s*[A-Za-z_][A-Za-z0-9_]*\s*=|\s*$)")


def _parse_header(header: str, first_line: int) -> dict[str, list[str]]:
    body = re.sub(r"&FCI|&END|/", " ", header, flags=re.IGNORECASE)
    items: dict[str, list[str]] = {}
    for m in _NAMELIST_ITEM.finditer(" ".join(body.split())):
        key = m.group(1).upper()
        vals = [v for v in re.split(r"[,\s]+", m.group(2).strip()) if v]
        items[key] = vals
    for key in ("NORB", "NELEC"):
        if key not in items or len(items[key]) != 1:
            raise FCIDumpError(f"line {first_line}: header is missing {key}")
    return items


def parse_fcidump(text: str | TextIO, atol: float = 1e-10) -> Hamiltonian:
    """Parse a Molpro-convention FCIDUMP stream or string.

    Indices in the file are 1-based; they are stored 0-based. Entries not listed
    are filled from the 8-fold (two-body) and 2-fold (one-body) symmetries.
    ORBSYM and ISYM are read and ignored.
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    lines = stream.read().splitlines()

    header_lines: list[str] = []
    i = 0
    while i < len(lines):
        header_lines.append(lines[i])
        stripped = lines[i].strip().upper()
        i += 1
        if stripped.endswith("&END") or stripped == "/" or stripped.endswith("/"):
            break
    else:
        raise FCIDumpError("line 1: unterminated namelist header (expected &END)")
    if not header_lines or "&FCI" not in header_lines[0].upper():
        raise FCIDumpError("line 1: header must start with &FCI")

    items = _parse_header(" ".join(header_lines), 1)
    try:
        norb = int(items["NORB"][0])
        nelec = int(items["NELEC"][0])
        ms2 = int(items.get("MS2", ["0"])[0])
    except ValueError as exc:
        raise FCIDumpError(f"line 1: non-integer header value ({exc})") from None
    if norb <= 0 or nelec < 0 or (nelec + ms2) % 2 or abs(ms2) > nelec:
        raise FCIDumpError(f"line 1: inconsistent header NORB={norb} NELEC={nelec} MS2={ms2}")
    n_alpha = (nelec + ms2) // 2
    n_beta = nelec - n_alpha

    h1 = np.zeros((norb, norb))
    eri = np.zeros((norb,) * 4)
    seen_h1: dict[tuple[int, int], float] = {}
    seen_eri: dict[tuple[int, int, int, int], float] = {}
    e_core = 0.0
    for lineno, line in enumerate(lines[i:], start=i + 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise FCIDumpError(f"line {lineno}: expected 'value p q r s', got {line!r}")
        try:
            val = float(fields[0].replace("D", "E").replace("d", "e"))
            p, q, r, s = (int(x) for x in fields[1:])
        except ValueError:
            raise FCIDumpError(f"line {lineno}: cannot parse {line!r}") from None
        if min(p, q, r, s) < 0 or max(p, q, r, s) > norb:
            raise FCIDumpError(f"line {lineno}: index out of range 0..{norb}")
        if p == q == r == s == 0:
            e_core = val
        elif r == s == 0:
            if p == 0 or q == 0:
                raise FCIDumpError(f"line {lineno}: malformed one-body index")
            key = (min(p, q) - 1, max(p, q) - 1)
            if key in seen_h1 and abs(seen_h1[key] - val) > atol:
                raise FCIDumpError(f"line {lineno}: conflicting duplicate one-body entry {key}")
            seen_h1[key] = val
            h1[key] = h1[key[::-1]] = val
        elif p == 0 and q == 0 and r == 0 and s != 0:
            raise FCIDumpError(f"line {lineno}: orbital energies are not supported")
        else:
            if 0 in (p, q, r, s):
                raise FCIDumpError(f"line {lineno}: malformed two-body index")
            idx = (p - 1, q - 1, r - 1, s - 1)
            orbit = _eri_orbit(*idx)
            key = min(orbit)
            if key in seen_eri and abs(seen_eri[key] - val) > atol:
                raise FCIDumpError(f"line {lineno}: conflicting duplicate two-body entry {idx}")
            seen_eri[key] = val
            for o in orbit:
                eri[o] = val
    return Hamiltonian(norb, n_alpha, n_beta, e_core, h1, eri)


def read_fcidump(path: str | Path) -> Hamiltonian:
    with open(path) as f:
        return parse_fcidump(f)


def write_fcidump(ham: Hamiltonian, dest: str | Path | TextIO, tol: float = 0.0) -> None:
    """Write unique entries (p>=q, r>=s, pq>=rs) in Molpro format."""
    own = isinstance(dest, (str, Path))
    f = open(dest, "w") if own else dest
    try:
        n = ham.n_orb
        f.write(f" &FCI NORB={n},NELEC={ham.n_elec},MS2={ham.n_alpha - ham.n_beta},\n")
        f.write("  ORBSYM=" + ",".join(["1"] * n) + ",\n  ISYM=1,\n &END\n")
        for p in range(n):
            for q in range(p + 1):
                pq = p * (p + 1) // 2 + q
                for r in range(n):
                    for s in range(r + 1):
                        if r * (r + 1) // 2 + s > pq:
                            continue
                        v = ham.eri[p, q, r, s]
                        if abs(v) > tol:
                            f.write(f"{float(v)!r:>28} {p + 1:4d} {q + 1:4d} {r + 1:4d} {s + 1:4d}\n")
        for p in range(n):
            for q in range(p + 1):
                v = ham.h1[p, q]
                if abs(v) > tol:
                    f.write(f"{float(v)!r:>28} {p + 1:4d} {q + 1:4d}    0    0\n")
        f.write(f"{float(ham.e_core)!r:>28}    0    0    0    0\n")
    finally:
        if own:
            f.close()


@dataclass(frozen=True)
class CholeskyFactors:
    vectors: np.ndarray  # (n_chol, n_orb, n_orb)
    tol: float
    max_error: float = field(default=0.0)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def reconstruct(self) -> np.ndarray:
        return np.einsum("gpq,grs->pqrs", self.vectors, self.vectors)


def cholesky_factorize(ham: Hamiltonian, tol: float = 1e-8) -> CholeskyFactors:
    """Pivoted Cholesky of the (pq|rs) supermatrix, computed column by column.

    Stops when the largest remaining diagonal element is at most ``tol``; every
    reconstructed element is then within ``tol`` by Cauchy-Schwarz on the residual.
    """
    n = ham.n_orb
    v = ham.eri.reshape(n * n, n * n)
    diag = np.diag(v).copy()
    vectors: list[np.ndarray] = []
    while True:
        piv = int(np.argmax(diag))
        dmax = diag[piv]
        if dmax < -tol:
            raise NotPSDError(f"integrals not PSD: pivot {piv} has residual diagonal {dmax:.3e}")
        if dmax <= tol or len(vectors) == n * n:
            break
        col = v[:, piv].copy()
        for L in vectors:
            col -= L * L[piv]
        L = col / np.sqrt(dmax)
        vectors.append(L)
        diag -= L * L
        if np.min(diag) < -tol:
            bad = int(np.argmin(diag))
            raise NotPSDError(f"integrals not PSD: pivot {bad} has residual diagonal {diag[bad]:.3e}")
    if vectors:
        mats = np.array(vectors).reshape(-1, n, n)
        mats = 0.5 * (mats + mats.transpose(0, 2, 1))
    else:
        mats = np.zeros((0, n, n))
    err = float(np.max(np.abs(np.einsum("gpq,grs->pqrs", mats, mats) - ham.eri), initial=0.0))
    return CholeskyFactors(mats, tol, err)


def freeze_core(ham: Hamiltonian, active_orbitals: Iterable[int], n_frozen_core: int) -> Hamiltonian:
    """Fold the first ``n_frozen_core`` doubly occupied orbitals into a mean field.

    Orbitals that are neither frozen nor active are dropped (frozen virtuals).
    """
    active = list(active_orbitals)
    core = list(range(n_frozen_core))
    if set(active) & set(core):
        raise ValueError(f"active orbitals {sorted(set(active) & set(core))} overlap the frozen core")
    if len(set(active)) != len(active) or any(not 0 <= a < ham.n_orb for a in active):
        raise ValueError("active orbitals must be distinct and in range")
    na, nb = ham.n_alpha - n_frozen_core, ham.n_beta - n_frozen_core
    if na < 0 or nb < 0 or na > len(active) or nb > len(active):
        raise ValueError("electron count incompatible with the frozen/active partition")
    if n_frozen_core == 0 and active == list(range(ham.n_orb)):
        return ham

    eri, h1 = ham.eri, ham.h1
    c = np.array(core, dtype=int)
    e_core = ham.e_core
    if core:
        e_core += 2.0 * np.trace(h1[np.ix_(c, c)])
        coul = np.einsum("iijj->", eri[np.ix_(c, c, c, c)])
        exch = np.einsum("ijji->", eri[np.ix_(c, c, c, c)])
        e_core += 2.0 * coul - exch
    a = np.array(active, dtype=int)
    h1a = h1[np.ix_(a, a)].copy()
    if core:
        h1a += 2.0 * np.einsum("pqcc->pq", eri[np.ix_(a, a, c, c)])
        h1a -= np.einsum("pccq->pq", eri[np.ix_(a, c, c, a)])
    eria = eri[np.ix_(a, a, a, a)].copy()
    return Hamiltonian(len(active), na, nb, float(e_core), h1a, eria)


def random_psd_hamiltonian(n_orb: int, n_alpha: int, n_beta: int, rng: np.random.Generator,
                           rank: int | None = None, scale: float = 0.3) -> Hamiltonian:
    """Synthetic Hamiltonian with 8-fold symmetric, positive semidefinite integrals."""
    rank = rank if rank is not None else n_orb * (n_orb + 1) // 2
    mats = rng.normal(size=(rank, n_orb, n_orb)) * scale / np.sqrt(rank)
    mats = 0.5 * (mats + mats.transpose(0, 2, 1))
    eri = np.einsum("gpq,grs->pqrs", mats, mats)
    h1 = rng.normal(size=(n_orb, n_orb))
    h1 = 0.5 * (h1 + h1.T) - 2.0 * np.eye(n_orb)
    return Hamiltonian(n_orb, n_alpha, n_beta, float(rng.normal()), h1, eri)
