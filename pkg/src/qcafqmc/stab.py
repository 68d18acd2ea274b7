"""Stabilizer formalism: Clifford tableaus, uniform sampling, measurement forms, amplitudes.

Paulis are stored as ``i^phase X^x Z^z`` with ``phase`` mod 4. A tableau row ``r``
holds the image ``U X_r U^dag`` (rows 0..n-1) or ``U Z_{r-n} U^dag`` (rows n..2n-1).
Bitstrings passed around as integers use the statevector convention: qubit 0 is
the most significant bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Iterable, Sequence

import numpy as np

from .qsim import Gate, gate

MAGIC = b"STAB v1\n"


# --- small GF(2) helpers ------------------------------------------------------

def _popparity(v):
    return np.bitwise_count(np.asarray(v, dtype=np.uint64)).astype(np.int64) & 1


def _row_to_int(row: np.ndarray) -> int:
    v = 0
    for b in row:
        v = (v << 1) | int(b)
    return v


def _int_to_row(v: int, n: int) -> np.ndarray:
    return np.array([(int(v) >> (n - 1 - q)) & 1 for q in range(n)], dtype=np.uint8)


def gf2_rank(m: np.ndarray) -> int:
    a = (np.asarray(m) % 2).astype(np.uint8).copy()
    r = 0
    for c in range(a.shape[1]):
        piv = np.nonzero(a[r:, c])[0]
        if piv.size == 0:
            continue
        p = r + piv[0]
        a[[r, p]] = a[[p, r]]
        mask = a[:, c].astype(bool)
        mask[r] = False
        a[mask] ^= a[r]
        r += 1
        if r == a.shape[0]:
            break
    return r


def gf2_inv(m: np.ndarray) -> np.ndarray:
    n = m.shape[0]
    a = np.concatenate([(m % 2).astype(np.uint8), np.eye(n, dtype=np.uint8)], axis=1)
    for c in range(n):
        piv = np.nonzero(a[c:, c])[0]
        if piv.size == 0:
            raise np.linalg.LinAlgError("matrix is singular over GF(2)")
        p = c + piv[0]
        a[[c, p]] = a[[p, c]]
        mask = a[:, c].astype(bool)
        mask[c] = False
        a[mask] ^= a[c]
    return a[:, n:].copy()


def gf2_solve_rows(basis: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Coefficients C with C @ basis = targets (mod 2); ``basis`` rows independent."""
    k = basis.shape[0]
    aug = np.concatenate([basis.T % 2, targets.T % 2], axis=1).astype(np.uint8)
    rows, cols = aug.shape
    pivots = []
    r = 0
    for c in range(k):
        piv = np.nonzero(aug[r:, c])[0]
        if piv.size == 0:
            raise np.linalg.LinAlgError("basis rows are dependent")
        p = r + piv[0]
        aug[[r, p]] = aug[[p, r]]
        mask = aug[:, c].astype(bool)
        mask[r] = False
        aug[mask] ^= aug[r]
        pivots.append(r)
        r += 1
    if aug[k:, k:].any():
        raise np.linalg.LinAlgError("target outside the row space")
    return aug[:k, k:].T.copy()


def _symplectic_form(n: int) -> np.ndarray:
    z = np.zeros((n, n), dtype=np.uint8)
    e = np.eye(n, dtype=np.uint8)
    return np.block([[z, e], [e, z]])


def _pmul(p1, x1, z1, p2, x2, z2):
    """(i^p1 X^x1 Z^z1)(i^p2 X^x2 Z^z2) for bit arrays."""
    p = (p1 + p2 + 2 * (np.asarray(z1, dtype=np.int64) @ np.asarray(x2, dtype=np.int64))) % 4
    return int(p), x1 ^ x2, z1 ^ z2


# --- tableau ------------------------------------------------------------------

@dataclass(frozen=True)
class CliffordTableau:
    n: int
    x: np.ndarray  # (2n, n) uint8
    z: np.ndarray  # (2n, n) uint8
    phase: np.ndarray  # (2n,) int, Pauli = i^phase X^x Z^z

    def __post_init__(self):
        for name in ("x", "z"):
            a = np.asarray(getattr(self, name), dtype=np.uint8) % 2
            if a.shape != (2 * self.n, self.n):
                raise ValueError(f"tableau {name} block must be {(2 * self.n, self.n)}, got {a.shape}")
            object.__setattr__(self, name, a)
        object.__setattr__(self, "phase", np.asarray(self.phase, dtype=np.int64) % 4)

    @classmethod
    def identity(cls, n: int) -> "CliffordTableau":
        e = np.eye(n, dtype=np.uint8)
        zero = np.zeros((n, n), dtype=np.uint8)
        return cls(n, np.vstack([e, zero]), np.vstack([zero, e]), np.zeros(2 * n, dtype=np.int64))

    @classmethod
    def from_symplectic(cls, mat: np.ndarray, signs: Sequence[int]) -> "CliffordTableau":
        """Build from a 2n x 2n binary matrix with rows (x | z) and Hermitian sign bits."""
        mat = np.asarray(mat, dtype=np.uint8) % 2
        n = mat.shape[0] // 2
        x, z = mat[:, :n], mat[:, n:]
        xz = np.sum(x & z, axis=1)
        return cls(n, x, z, xz + 2 * np.asarray(signs, dtype=np.int64))

    @classmethod
    def from_gates(cls, gates: Iterable[Gate], n: int) -> "CliffordTableau":
        t = cls.identity(n)
        for g in gates:
            t = t.apply(g)
        return t

    @property
    def symplectic(self) -> np.ndarray:
        return np.concatenate([self.x, self.z], axis=1)

    @property
    def signs(self) -> np.ndarray:
        xz = np.sum(self.x & self.z, axis=1)
        return (((self.phase - xz) % 4) // 2).astype(np.uint8)

    def is_symplectic(self) -> bool:
        m = self.symplectic.astype(np.int64)
        return bool(np.array_equal((m @ _symplectic_form(self.n) @ m.T) % 2, _symplectic_form(self.n)))

    def is_hermitian(self) -> bool:
        xz = np.sum(self.x & self.z, axis=1)
        return bool(np.all((self.phase - xz) % 2 == 0))

    def __eq__(self, other) -> bool:
        return (isinstance(other, CliffordTableau) and self.n == other.n and np.array_equal(self.x, other.x)
                and np.array_equal(self.z, other.z) and np.array_equal(self.phase, other.phase))

    def __hash__(self) -> int:
        return hash((self.n, self.x.tobytes(), self.z.tobytes(), self.phase.tobytes()))

    def apply(self, g: Gate) -> "CliffordTableau":
        """Tableau of ``g . U`` (the gate applied after this Clifford)."""
        x, z, p = self.x.copy(), self.z.copy(), self.phase.copy()
        t = g.targets
        a = t[0]
        if g.name == "H":
            p += 2 * (x[:, a] & z[:, a])
            x[:, a], z[:, a] = z[:, a].copy(), x[:, a].copy()
        elif g.name == "P":
            p += x[:, a]
            z[:, a] ^= x[:, a]
        elif g.name == "PDG":
            p += 3 * x[:, a]
            z[:, a] ^= x[:, a]
        elif g.name == "X":
            p += 2 * z[:, a]
        elif g.name == "Z":
            p += 2 * x[:, a]
        elif g.name == "Y":
            p += 2 * (x[:, a] ^ z[:, a])
        elif g.name == "CNOT":
            b = t[1]
            x[:, b] ^= x[:, a]
            z[:, a] ^= z[:, b]
        elif g.name == "CZ":
            b = t[1]
            p += 2 * (x[:, a] & x[:, b])
            z[:, a] ^= x[:, b]
            z[:, b] ^= x[:, a]
        elif g.name == "SWAP":
            b = t[1]
            x[:, [a, b]] = x[:, [b, a]]
            z[:, [a, b]] = z[:, [b, a]]
        else:
            raise ValueError(f"{g.name} is not a Clifford gate")
        return CliffordTableau(self.n, x, z, p)

    def conjugate(self, p: int, x: np.ndarray, z: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
        """Image U (i^p X^x Z^z) U^dag."""
        n = self.n
        rp, rx, rz = p % 4, np.zeros(n, dtype=np.uint8), np.zeros(n, dtype=np.uint8)
        for j in np.nonzero(x)[0]:
            rp, rx, rz = _pmul(rp, rx, rz, self.phase[j], self.x[j], self.z[j])
        for j in np.nonzero(z)[0]:
            rp, rx, rz = _pmul(rp, rx, rz, self.phase[n + j], self.x[n + j], self.z[n + j])
        return rp, rx, rz

    def then(self, other: "CliffordTableau") -> "CliffordTableau":
        """Tableau of ``other . self`` (self applied first)."""
        rows = [other.conjugate(self.phase[r], self.x[r], self.z[r]) for r in range(2 * self.n)]
        return CliffordTableau(self.n, np.array([r[1] for r in rows]), np.array([r[2] for r in rows]),
                               np.array([r[0] for r in rows]))

    def inverse(self) -> "CliffordTableau":
        n = self.n
        omega = _symplectic_form(n).astype(np.int64)
        minv = (omega @ self.symplectic.astype(np.int64).T @ omega) % 2
        x, z = minv[:, :n].astype(np.uint8), minv[:, n:].astype(np.uint8)
        phase = np.sum(x & z, axis=1).astype(np.int64)
        # fix signs so that U (U^dag P U) U^dag = +P
        for r in range(2 * n):
            q, _, _ = self.conjugate(phase[r], x[r], z[r])
            target = 0
            phase[r] = (phase[r] + (target - q)) % 4
        return CliffordTableau(n, x, z, phase)

    def to_bytes(self) -> bytes:
        return pack_rows(self.symplectic) + pack_rows(self.signs[:, None])

    @classmethod
    def from_bytes(cls, n: int, data: bytes, offset: int = 0) -> tuple["CliffordTableau", int]:
        mat, off = unpack_rows(data, 2 * n, 2 * n, offset)
        signs, off = unpack_rows(data, 2 * n, 1, off)
        return cls.from_symplectic(mat, signs[:, 0]), off


# --- uniform sampling ---------------------------------------------------------

def _qmallows_probability(m: int, index: int) -> float:
    return 2.0 ** (-index - 1) / (1.0 - 4.0 ** (-m))


def _sample_qmallows(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    had = np.zeros(n, dtype=bool)
    perm = np.zeros(n, dtype=int)
    inds = list(range(n))
    for i in range(n):
        m = n - i
        r = rng.random()
        index = -int(np.ceil(np.log2(r + (1.0 - r) * 4.0 ** (-m))))
        index = min(max(index, 0), 2 * m - 1)
        had[i], perm[i] = _qmallows_apply(inds, m, index)
    return had, perm


def _qmallows_apply(inds: list[int], m: int, index: int) -> tuple[bool, int]:
    h = index < m
    k = index if h else 2 * m - index - 1
    return h, inds.pop(k)


def _canonical_slots(had: np.ndarray, perm: np.ndarray) -> list[tuple[str, int, int]]:
    """Free bits of the canonical form, in the order they are consumed."""
    n = len(had)
    slots = []
    for i in range(n):
        slots.append(("g2", i, i))
        if had[i]:
            slots.append(("g1", i, i))
    for j in range(n):
        for i in range(j + 1, n):
            slots.append(("g2", i, j))
            slots.append(("d2", i, j))
            if had[i] and had[j]:
                slots.append(("g1", i, j))
            if had[i] and not had[j] and perm[i] < perm[j]:
                slots.append(("g1", i, j))
            if not had[i] and had[j] and perm[i] > perm[j]:
                slots.append(("g1", i, j))
            if not had[i] and had[j]:
                slots.append(("d1", i, j))
            if had[i] and had[j] and perm[i] > perm[j]:
                slots.append(("d1", i, j))
            if not had[i] and not had[j] and perm[i] < perm[j]:
                slots.append(("d1", i, j))
    return slots


def _canonical_symplectic(had: np.ndarray, perm: np.ndarray, bits: Sequence[int]) -> np.ndarray:
    n = len(had)
    mats = {"g1": np.zeros((n, n), dtype=np.int64), "g2": np.zeros((n, n), dtype=np.int64),
            "d1": np.eye(n, dtype=np.int64), "d2": np.eye(n, dtype=np.int64)}
    slots = _canonical_slots(had, perm)
    if len(bits) != len(slots):
        raise ValueError("bit count does not match canonical form")
    for (name, i, j), b in zip(slots, bits):
        mats[name][i, j] = b
        if name in ("g1", "g2"):
            mats[name][j, i] = b
    zero = np.zeros((n, n), dtype=np.int64)

    def layer(gam, dlt):
        inv_t = gf2_inv(dlt.astype(np.uint8)).T.astype(np.int64)
        return np.block([[dlt, zero], [(gam @ dlt) % 2, inv_t]])

    t1 = layer(mats["g1"], mats["d1"])
    t2 = layer(mats["g2"], mats["d2"])
    table = t2[np.concatenate([perm, n + perm])]
    hidx = np.nonzero(had)[0]
    table[np.concatenate([hidx, n + hidx])] = table[np.concatenate([n + hidx, hidx])]
    return ((t1 @ table) % 2).astype(np.uint8)


def sample_uniform_clifford(n: int, rng: np.random.Generator) -> CliffordTableau:
    """Uniformly random n-qubit Clifford (modulo global phase)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    had, perm = _sample_qmallows(n, rng)
    bits = rng.integers(0, 2, size=len(_canonical_slots(had, perm)))
    mat = _canonical_symplectic(had, perm, bits)
    signs = rng.integers(0, 2, size=2 * n)
    return CliffordTableau.from_symplectic(mat, signs)


def enumerate_canonical(n: int):
    """Yield (probability, symplectic matrix) over every random choice of the sampler.

    Signs are uniform and independent, so they are left out. Intended for n <= 2.
    """
    def rec(i, inds, had, perm, prob):
        if i == n:
            h, p = np.array(had), np.array(perm)
            nb = len(_canonical_slots(h, p))
            w = prob / 2**nb
            for bits in product((0, 1), repeat=nb):
                yield w, _canonical_symplectic(h, p, bits)
            return
        m = n - i
        for index in range(2 * m):
            left = list(inds)
            hh, pp = _qmallows_apply(left, m, index)
            yield from rec(i + 1, left, had + [hh], perm + [pp], prob * _qmallows_probability(m, index))

    yield from rec(0, list(range(n)), [], [], 1.0)


def enumerate_cliffords(n: int):
    """All Cliffords (mod phase) as (probability under the sampler, tableau)."""
    for w, mat in enumerate_canonical(n):
        for signs in product((0, 1), repeat=2 * n):
            yield w / 4**n, CliffordTableau.from_symplectic(mat, signs)


def clifford_group_order(n: int) -> int:
    out = 2 ** (n * n + 2 * n)
    for i in range(1, n + 1):
        out *= 4**i - 1
    return out


def stabilizer_state_count(n: int) -> int:
    out = 2**n
    for i in range(1, n + 1):
        out *= 2**i + 1
    return out


# --- measurement form ---------------------------------------------------------

@dataclass(frozen=True)
class GForm:
    """G = H_I . P^diag(Gamma) . CZ^Gamma . CX^Delta, applied right to left.

    ``delta[i, j] = 1`` means CNOT with control i (in I) and target j (not in I);
    ``gamma`` is upper triangular and supported on I x I. Measuring after U is
    equivalent to measuring after G and mapping outcomes b' -> post_m @ b' + post_s.
    """

    n: int
    active: tuple[int, ...]
    gamma: np.ndarray
    delta: np.ndarray
    post_m: np.ndarray = field(default=None)
    post_s: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.n
        object.__setattr__(self, "active", tuple(sorted(int(i) for i in self.active)))
        object.__setattr__(self, "gamma", np.triu(np.asarray(self.gamma, dtype=np.uint8) % 2))
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=np.uint8) % 2)
        if self.post_m is None:
            object.__setattr__(self, "post_m", np.eye(n, dtype=np.uint8))
        if self.post_s is None:
            object.__setattr__(self, "post_s", np.zeros(n, dtype=np.uint8))
        object.__setattr__(self, "post_m", np.asarray(self.post_m, dtype=np.uint8) % 2)
        object.__setattr__(self, "post_s", np.asarray(self.post_s, dtype=np.uint8) % 2)
        mask = np.zeros(n, dtype=bool)
        mask[list(self.active)] = True
        if np.any(self.gamma[~mask]) or np.any(self.gamma[:, ~mask]):
            raise ValueError("Gamma must be supported on I x I")
        if np.any(self.delta[~mask]) or np.any(self.delta[:, mask]):
            raise ValueError("Delta must map I to its complement")
        if gf2_rank(self.post_m) != n:
            raise ValueError("post-processing matrix must be invertible")

    @classmethod
    def identity(cls, n: int) -> "GForm":
        z = np.zeros((n, n), dtype=np.uint8)
        return cls(n, (), z, z)

    @property
    def k(self) -> int:
        return len(self.active)

    def key(self) -> tuple:
        return (self.n, self.active, self.gamma.tobytes(), self.delta.tobytes())

    def gates(self) -> list[Gate]:
        return gform_circuit(self)

    def tableau(self) -> CliffordTableau:
        return CliffordTableau.from_gates(self.gates(), self.n)

    def map_outcomes(self, outcomes) -> np.ndarray:
        """Apply post_affine to G-outcomes (integers), giving U-outcomes."""
        bits = _ints_to_bits(outcomes, self.n)
        out = (bits.astype(np.int64) @ self.post_m.T.astype(np.int64) + self.post_s) % 2
        return _bits_to_ints(out)

    def to_bytes(self) -> bytes:
        n = self.n
        mask = np.zeros((1, n), dtype=np.uint8)
        mask[0, list(self.active)] = 1
        return (pack_rows(mask) + pack_rows(self.gamma) + pack_rows(self.delta) + pack_rows(self.post_m)
                + pack_rows(self.post_s[None, :]))

    @classmethod
    def from_bytes(cls, n: int, data: bytes, offset: int = 0) -> tuple["GForm", int]:
        mask, offset = unpack_rows(data, 1, n, offset)
        gam, offset = unpack_rows(data, n, n, offset)
        dlt, offset = unpack_rows(data, n, n, offset)
        pm, offset = unpack_rows(data, n, n, offset)
        ps, offset = unpack_rows(data, 1, n, offset)
        return cls(n, tuple(np.nonzero(mask[0])[0]), gam, dlt, pm, ps[0]), offset

    def __eq__(self, other) -> bool:
        return (isinstance(other, GForm) and self.key() == other.key()
                and np.array_equal(self.post_m, other.post_m) and np.array_equal(self.post_s, other.post_s))

    def __hash__(self) -> int:
        return hash(self.key())


def _ints_to_bits(v, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1)
    return ((v[..., None] >> shifts) & 1).astype(np.uint8)


def _bits_to_ints(bits: np.ndarray) -> np.ndarray:
    n = bits.shape[-1]
    w = 1 << np.arange(n - 1, -1, -1, dtype=np.int64)
    return (bits.astype(np.int64) * w).sum(axis=-1)


def _rref(rows: np.ndarray) -> tuple[np.ndarray, list[int]]:
    a = rows.copy()
    pivots = []
    r = 0
    for c in range(a.shape[1]):
        if r == a.shape[0]:
            break
        piv = np.nonzero(a[r:, c])[0]
        if piv.size == 0:
            continue
        p = r + piv[0]
        a[[r, p]] = a[[p, r]]
        mask = a[:, c].astype(bool)
        mask[r] = False
        a[mask] ^= a[r]
        pivots.append(c)
        r += 1
    return a, pivots


def _lagrangian_gform(x: np.ndarray, z: np.ndarray) -> tuple[tuple[int, ...], np.ndarray, np.ndarray]:
    """(I, Gamma, Delta) of the G whose measurement stabilizers span the rows (x | z)."""
    n = x.shape[1]
    full = np.concatenate([x, z], axis=1)
    red, pivots = _rref(full)
    k = sum(1 for p in pivots if p < n)
    xrows = red[:k]
    active = tuple(pivots[:k])
    delta = np.zeros((n, n), dtype=np.uint8)
    for r, i in enumerate(active):
        for j in range(n):
            if j not in active and xrows[r, j]:
                delta[i, j] = 1
    # push each X row through CX^Delta; the Z part on I then gives Gamma
    cx = CliffordTableau.from_gates(_cx_gates(active, delta), n)
    gamma = np.zeros((n, n), dtype=np.uint8)
    for r, i in enumerate(active):
        _, xr, zr = cx.conjugate(0, xrows[r, :n], xrows[r, n:])
        for j in active:
            if zr[j]:
                gamma[min(i, j), max(i, j)] = 1
    return active, gamma, delta


def _cx_gates(active, delta) -> list[Gate]:
    return [gate("CNOT", i, j) for i in active for j in np.nonzero(delta[i])[0]]


def to_measurement_form(u: CliffordTableau) -> GForm:
    """Measurement-equivalent G form of ``u`` with the outcome relabeling in post_affine."""
    n = u.n
    inv = u.inverse()
    tx, tz, tp = inv.x[n:], inv.z[n:], inv.phase[n:]
    active, gamma, delta = _lagrangian_gform(tx, tz)
    g0 = GForm(n, active, gamma, delta)
    ginv = g0.tableau().inverse()
    gx, gz, gp = ginv.x[n:], ginv.z[n:], ginv.phase[n:]
    basis = np.concatenate([gx, gz], axis=1)
    targets = np.concatenate([tx, tz], axis=1)
    m = gf2_solve_rows(basis, targets)
    s = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        q, qx, qz = 0, np.zeros(n, dtype=np.uint8), np.zeros(n, dtype=np.uint8)
        for j in np.nonzero(m[i])[0]:
            q, qx, qz = _pmul(q, qx, qz, gp[j], gx[j], gz[j])
        assert np.array_equal(qx, tx[i]) and np.array_equal(qz, tz[i])
        d = (tp[i] - q) % 4
        if d % 2:
            raise AssertionError("non-Hermitian stabilizer encountered")
        s[i] = d // 2
    return GForm(n, active, gamma, delta, m, s)


def _edge_colouring(vertices: Sequence[int]) -> list[list[tuple[int, int]]]:
    """Round-robin 1-factorization of the complete graph on ``vertices``."""
    v = list(vertices)
    if len(v) < 2:
        return []
    if len(v) % 2:
        v.append(None)
    m = len(v)
    rounds = []
    for r in range(m - 1):
        pairs = []
        for i in range(m // 2):
            a, b = v[i], v[m - 1 - i]
            if a is not None and b is not None:
                pairs.append((min(a, b), max(a, b)))
        rounds.append(pairs)
        v = [v[0]] + [v[-1]] + v[1:-1]
    return rounds


def gform_circuit(g: GForm) -> list[Gate]:
    """Gate list (applied first to last) realizing G with 2-qubit depth <= 2n."""
    act = list(g.active)
    rest = [j for j in range(g.n) if j not in act]
    gates: list[Gate] = []
    # CX^Delta: bipartite controls x targets, scheduled in max(|I|, |rest|) rounds
    if act and rest:
        big, small = (rest, act) if len(rest) >= len(act) else (act, rest)
        for t in range(len(big)):
            for a, s in enumerate(small):
                b = big[(a + t) % len(big)]
                c, tg = (s, b) if small is act else (b, s)
                if g.delta[c, tg]:
                    gates.append(gate("CNOT", c, tg))
    for rnd in _edge_colouring(act):
        for a, b in rnd:
            if g.gamma[a, b]:
                gates.append(gate("CZ", a, b))
    for i in act:
        if g.gamma[i, i]:
            gates.append(gate("P", i))
    for i in act:
        gates.append(gate("H", i))
    return gates


def two_qubit_depth(gates: Sequence[Gate], n: int) -> int:
    depth = np.zeros(n, dtype=int)
    for gt in gates:
        if len(gt.targets) == 2:
            a, b = gt.targets
            d = max(depth[a], depth[b]) + 1
            depth[a] = depth[b] = d
    return int(depth.max(initial=0))


# --- amplitudes -----------------------------------------------------------------

class _GFormMasks:
    def __init__(self, g: GForm):
        n = g.n
        bit = lambda q: 1 << (n - 1 - q)
        self.n = n
        self.k = g.k
        self.mask_i = sum(bit(i) for i in g.active)
        self.mask_rest = ((1 << n) - 1) ^ self.mask_i
        self.diag = sum(bit(i) for i in g.active if g.gamma[i, i])
        self.cx = [(bit(i), _row_to_int(g.delta[i])) for i in g.active if g.delta[i].any()]
        self.quad = [(bit(i), sum(bit(j) for j in range(i + 1, n) if g.gamma[i, j])) for i in g.active]
        self.quad = [(a, b) for a, b in self.quad if b]

    def linear(self, x: np.ndarray) -> np.ndarray:
        y = x.copy()
        for cbit, tmask in self.cx:
            y ^= np.where((x & cbit) != 0, tmask, 0)
        return y

    def phase_power(self, y: np.ndarray) -> np.ndarray:
        """Power of i picked up by P^Gamma_ii CZ^Gamma on basis state y."""
        e = np.bitwise_count((y & self.diag).astype(np.uint64)).astype(np.int64)
        for ibit, jmask in self.quad:
            e += 2 * (((y & ibit) != 0) & (_popparity(y & jmask) == 1))
        return e


def gform_amplitudes(g: GForm, b, x) -> np.ndarray:
    """<b|G|x> for broadcastable integer arrays ``b`` and ``x``."""
    m = _GFormMasks(g)
    b = np.asarray(b, dtype=np.int64)
    x = np.asarray(x, dtype=np.int64)
    y = m.linear(x)
    valid = ((y ^ b) & m.mask_rest) == 0
    e = m.phase_power(y) + 2 * _popparity(b & y & m.mask_i)
    amp = (1j ** (e % 4)) * 2.0 ** (-m.k / 2)
    return np.where(valid, amp, 0.0)


def apply_gform(g: GForm, amplitudes: np.ndarray) -> np.ndarray:
    """G applied to a statevector (or to columns of a (2^n, m) array)."""
    n = g.n
    m = _GFormMasks(g)
    a = np.asarray(amplitudes, dtype=complex)
    idx = np.arange(2**n, dtype=np.int64)
    y = m.linear(idx)  # CX^Delta is an involution
    out = a[y] * (1j ** (m.phase_power(idx) % 4)).reshape((-1,) + (1,) * (a.ndim - 1))
    if m.k:
        shape = (2,) * n + a.shape[1:]
        out = out.reshape(shape)
        h = np.array([[1, 1], [1, -1]]) / np.sqrt(2)
        for i in g.active:
            out = np.moveaxis(np.tensordot(h, out, axes=(1, i)), 0, i)
        out = out.reshape(a.shape)
    return out


@dataclass(frozen=True)
class StabilizerState:
    """U|0> in affine form with a fixed global phase (positive amplitude at x0).

    Support is x0 + span(shift rows); ``gen_*`` are the X-carrying stabilizer
    generators whose X parts are in reduced row echelon form with ``pivots``.
    """

    n: int
    x0: int
    pivots: tuple[int, ...]
    gen_x: tuple[int, ...]
    gen_z: tuple[int, ...]
    gen_p: tuple[int, ...]
    con_z: tuple[int, ...]
    con_s: tuple[int, ...]

    @property
    def k(self) -> int:
        return len(self.gen_x)

    def amplitudes(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64)
        ok = np.ones(y.shape, dtype=bool)
        for cz, cs in zip(self.con_z, self.con_s):
            ok &= _popparity(y & cz) == cs
        cur = np.full(y.shape, self.x0, dtype=np.int64)
        e = np.zeros(y.shape, dtype=np.int64)
        for piv, gx, gz, gp in zip(self.pivots, self.gen_x, self.gen_z, self.gen_p):
            take = (y >> (self.n - 1 - piv)) & 1 == 1
            e = np.where(take, e + gp + 2 * _popparity(cur & gz), e)
            cur = np.where(take, cur ^ gx, cur)
        ok &= cur == y
        return np.where(ok, (1j ** (e % 4)) * 2.0 ** (-self.k / 2), 0.0)


def _stabilizer_state(u: CliffordTableau) -> StabilizerState:
    n = u.n
    rows = [(int(u.phase[n + i]), u.x[n + i].copy(), u.z[n + i].copy()) for i in range(n)]
    # Gaussian elimination on X parts, tracking phases through Pauli products
    pivots = []
    r = 0
    for c in range(n):
        cand = [j for j in range(r, n) if rows[j][1][c]]
        if not cand:
            continue
        rows[r], rows[cand[0]] = rows[cand[0]], rows[r]
        for j in range(n):
            if j != r and rows[j][1][c]:
                rows[j] = _pmul(*rows[j], *rows[r])
        pivots.append(c)
        r += 1
    k = r
    zrows = rows[k:]
    # constraints z.y = s from Z-only generators (phase 0 or 2)
    con_z = tuple(_row_to_int(zr) for _, _, zr in zrows)
    con_s = tuple((p % 4) // 2 for p, _, _ in zrows)
    x0 = _solve_constraints(n, [zr for _, _, zr in zrows], con_s)
    gx = [_row_to_int(xr) for _, xr, _ in rows[:k]]
    for piv, v in zip(pivots, gx):
        if (x0 >> (n - 1 - piv)) & 1:
            x0 ^= v
    return StabilizerState(n, x0, tuple(pivots), tuple(gx), tuple(_row_to_int(zr) for _, _, zr in rows[:k]),
                           tuple(int(p) for p, _, _ in rows[:k]), con_z, con_s)


def _solve_constraints(n: int, zrows: list[np.ndarray], rhs: Sequence[int]) -> int:
    if not zrows:
        return 0
    a = np.concatenate([np.array(zrows, dtype=np.uint8), np.array(rhs, dtype=np.uint8)[:, None]], axis=1)
    red, pivots = _rref(a)
    if n in pivots:
        raise AssertionError("inconsistent stabilizer constraints")
    y = np.zeros(n, dtype=np.uint8)
    for r, c in enumerate(pivots):
        y[c] = red[r, n]
    return _row_to_int(y)


def clifford_amplitudes(u: CliffordTableau, b, beta, state: StabilizerState | None = None) -> np.ndarray:
    """<b|U|beta> for broadcastable integer arrays, global phase fixed by U|0>."""
    n = u.n
    st = state or _stabilizer_state(u)
    b = np.asarray(b, dtype=np.int64)
    beta = np.asarray(beta, dtype=np.int64)
    # P_beta = U X^beta U^dag as (phase, x, z) integer arrays over beta
    px = np.zeros(beta.shape, dtype=np.int64)
    pz = np.zeros(beta.shape, dtype=np.int64)
    pp = np.zeros(beta.shape, dtype=np.int64)
    for j in range(n):
        take = (beta >> (n - 1 - j)) & 1 == 1
        rx, rz = _row_to_int(u.x[j]), _row_to_int(u.z[j])
        pp = np.where(take, pp + int(u.phase[j]) + 2 * _popparity(pz & rx), pp)
        px = np.where(take, px ^ rx, px)
        pz = np.where(take, pz ^ rz, pz)
    src = b ^ px
    e = pp + 2 * _popparity(pz & src)
    return (1j ** (e % 4)) * st.amplitudes(src)


def stab_amplitude(u: CliffordTableau, b, beta) -> complex | np.ndarray:
    """<beta|U^dag|b>; integer or bitstring arguments, vectorized over arrays."""
    def as_int(v):
        if isinstance(v, str):
            return int(v, 2)
        if isinstance(v, (list, tuple)):
            return _row_to_int(v)
        return v
    out = np.conj(clifford_amplitudes(u, as_int(b), as_int(beta)))
    return complex(out) if np.ndim(out) == 0 else out


# --- exhaustive enumeration of measurement bases -----------------------------

def enumerate_gforms(n: int) -> list[GForm]:
    """One canonical G per Lagrangian subspace (prod_{i=1..n} (2^i + 1) of them)."""
    out = []
    for k in range(n + 1):
        for act in combinations(range(n), k):
            free_d = [(i, j) for i in act for j in range(i + 1, n) if j not in act]
            free_g = [(a, b) for ai, a in enumerate(act) for b in act[ai:]]
            for dbits in product((0, 1), repeat=len(free_d)):
                delta = np.zeros((n, n), dtype=np.uint8)
                for (i, j), v in zip(free_d, dbits):
                    delta[i, j] = v
                for gbits in product((0, 1), repeat=len(free_g)):
                    gamma = np.zeros((n, n), dtype=np.uint8)
                    for (a, b), v in zip(free_g, gbits):
                        gamma[a, b] = v
                    out.append(GForm(n, act, gamma, delta))
    return out


# --- packing --------------------------------------------------------------------

def pack_rows(mat: np.ndarray) -> bytes:
    """Binary rows packed little-endian (bit j of a row -> bit j%8 of byte j//8)."""
    mat = np.atleast_2d(np.asarray(mat, dtype=np.uint8))
    return np.packbits(mat, axis=1, bitorder="little").tobytes()


def unpack_rows(data: bytes, n_rows: int, n_cols: int, offset: int) -> tuple[np.ndarray, int]:
    nb = (n_cols + 7) // 8
    size = n_rows * nb
    raw = np.frombuffer(data, dtype=np.uint8, count=size, offset=offset).reshape(n_rows, nb)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, :n_cols]
    return bits.astype(np.uint8), offset + size


def write_stab(path, tableaus: Sequence[CliffordTableau], gforms: Sequence[GForm] = ()) -> None:
    n = tableaus[0].n if tableaus else gforms[0].n
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<III", n, len(tableaus), len(gforms)))
        for t in tableaus:
            f.write(t.to_bytes())
        for g in gforms:
            f.write(g.to_bytes())


def read_stab(path) -> tuple[list[CliffordTableau], list[GForm]]:
    data = open(path, "rb").read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a STAB v1 file")
    n, nt, ng = struct.unpack_from("<III", data, len(MAGIC))
    off = len(MAGIC) + 12
    tabs, gfs = [], []
    for _ in range(nt):
        t, off = CliffordTableau.from_bytes(n, data, off)
        tabs.append(t)
    for _ in range(ng):
        g, off = GForm.from_bytes(n, data, off)
        gfs.append(g)
    return tabs, gfs
