"""Classical shadows of |tau> = (|0> + |Psi>)/sqrt(2) and overlap estimation.

Each sampled Clifford U is stored by its measurement form G (``stab.GForm``); outcomes
are the raw bitstrings b' measured after G. Since <b'|G|x> and <b|U|x> (b the
post-processed outcome) differ only by an x-independent phase, the overlap estimator

    <beta|Psi> ~ 2 (2^N + 1) conj(<b'|G|beta>) <b'|G|0>

can be evaluated from G directly. The spin-partitioned variant uses independent
Cliffords per part and the product of the per-part factors.
"""

from __future__ import annotations

import itertools
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import stab
from .oracle import SectorBasis, SectorHamiltonian, SectorTooLargeError
from .hamio import Hamiltonian
from .qsim import NoiseModel, StateVector
from .slater import SlaterDeterminant
from .trial import AmplitudeMap, ShadowReconstructed, TrialWavefunction, trial_overlap

MAGIC = b"SHDW v1\n"
DEFAULT_SHOTS = 1000


@dataclass(frozen=True)
class Ensemble:
    """Global (one part of n qubits) or partitioned Clifford ensemble.

    ``identity_only`` forces every sampled Clifford to the identity (test hook).
    """

    parts: tuple[int, ...]
    identity_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(int(p) for p in self.parts))
        if not self.parts or any(p < 1 for p in self.parts):
            raise ValueError(f"invalid part sizes {self.parts}")

    @classmethod
    def global_(cls, n: int) -> "Ensemble":
        return cls((n,))

    @classmethod
    def partitioned(cls, *sizes: int) -> "Ensemble":
        return cls(tuple(sizes))

    @property
    def kind(self) -> str:
        return "global" if len(self.parts) == 1 else "partitioned"

    @property
    def n_qubits(self) -> int:
        return sum(self.parts)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.cumsum((0,) + self.parts[:-1]))

    def prefactor(self) -> float:
        return 2.0 * float(np.prod([2.0**p + 1 for p in self.parts]))


@dataclass(frozen=True)
class ShadowRecord:
    ensemble: Ensemble
    gforms: tuple[tuple[stab.GForm, ...], ...]
    outcomes: np.ndarray  # (n_cliffords, shots) integer outcomes, qubit 0 most significant
    shots_per_clifford: int
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    def __post_init__(self):
        out = np.asarray(self.outcomes, dtype=np.int64)
        out.setflags(write=False)
        object.__setattr__(self, "outcomes", out)
        if not self.gforms:
            raise ValueError("shadow record has no entries")
        if out.shape != (len(self.gforms), self.shots_per_clifford):
            raise ValueError(f"outcomes shape {out.shape} does not match {len(self.gforms)} x {self.shots_per_clifford}")
        for entry in self.gforms:
            if tuple(g.n for g in entry) != self.ensemble.parts:
                raise ValueError("GForm sizes do not match the ensemble parts")
        if out.size and (out.min() < 0 or out.max() >= 2**self.n_qubits):
            raise ValueError("outcome out of range")

    @property
    def n_qubits(self) -> int:
        return self.ensemble.n_qubits

    @property
    def n_cliffords(self) -> int:
        return len(self.gforms)

    def subset(self, n: int) -> "ShadowRecord":
        """First n Cliffords (records are prefix-consistent under a fixed seed)."""
        return ShadowRecord(self.ensemble, self.gforms[:n], self.outcomes[:n], self.shots_per_clifford,
                            self.noise, self.seed)


@dataclass(frozen=True)
class OverlapEstimate:
    value: complex
    std_error: float
    n_samples: int


# --- acquisition -----------------------------------------------------------------

def _stream(seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(k)])))


def apply_parts(gforms: Sequence[stab.GForm], amplitudes: np.ndarray, parts: Sequence[int]) -> np.ndarray:
    """Tensor product of per-part GForms applied to a statevector."""
    a = np.asarray(amplitudes, dtype=complex).reshape(tuple(2**p for p in parts))
    for i, g in enumerate(gforms):
        a = np.moveaxis(a, i, 0)
        shape = a.shape
        a = stab.apply_gform(g, a.reshape(shape[0], -1)).reshape(shape)
        a = np.moveaxis(a, 0, i)
    return a.reshape(-1)


def _acquire_one(amps: np.ndarray, ensemble: Ensemble, shots: int, p: float, seed: int, k: int):
    rng = _stream(seed, k)
    if ensemble.identity_only:
        gforms = tuple(stab.GForm.identity(n) for n in ensemble.parts)
    else:
        gforms = tuple(stab.to_measurement_form(stab.sample_uniform_clifford(n, rng)) for n in ensemble.parts)
    rotated = apply_parts(gforms, amps, ensemble.parts)
    probs = np.abs(rotated) ** 2
    probs /= probs.sum()
    if p > 0.0:
        probs = (1.0 - p) * probs + p / probs.size
    out = rng.choice(probs.size, size=shots, p=probs)
    return gforms, out


def acquire_shadow(tau: StateVector, ensemble: Ensemble | int, n_cliffords: int, shots: int = DEFAULT_SHOTS,
                   noise: NoiseModel | None = None, seed: int = 0, n_threads: int = 1) -> ShadowRecord:
    """Sample Cliffords and measurement outcomes of ``tau``.

    Clifford k draws everything from its own counter-based stream (seed, k), so the
    record does not depend on ``n_threads`` and shorter runs are prefixes of longer ones.
    """
    if isinstance(ensemble, int):
        ensemble = Ensemble.global_(ensemble)
    noise = noise or NoiseModel()
    if ensemble.n_qubits != tau.n_qubits:
        raise ValueError(f"ensemble covers {ensemble.n_qubits} qubits, state has {tau.n_qubits}")
    if n_cliffords < 1 or shots < 1:
        raise ValueError("n_cliffords and shots must be positive")
    amps = tau.amplitudes
    job = lambda k: _acquire_one(amps, ensemble, shots, noise.depolarizing_p, seed, k)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            results = list(ex.map(job, range(n_cliffords)))
    else:
        results = [job(k) for k in range(n_cliffords)]
    gforms = tuple(r[0] for r in results)
    outcomes = np.array([r[1] for r in results], dtype=np.int64)
    return ShadowRecord(ensemble, gforms, outcomes, shots, noise, seed)


# --- archive ---------------------------------------------------------------------

def write_shadow(record: ShadowRecord, path) -> None:
    ens = record.ensemble
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BBI", 0 if ens.kind == "global" else 1, int(ens.identity_only), len(ens.parts)))
        f.write(struct.pack(f"<{len(ens.parts)}I", *ens.parts))
        f.write(struct.pack("<IIqd", record.n_cliffords, record.shots_per_clifford, record.seed,
                            record.noise.depolarizing_p))
        for entry, out in zip(record.gforms, record.outcomes):
            for g in entry:
                f.write(g.to_bytes())
            f.write(np.asarray(out, dtype="<u8").tobytes())


def read_shadow(path) -> ShadowRecord:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a SHDW v1 archive")
    off = len(MAGIC)
    _, ident, n_parts = struct.unpack_from("<BBI", data, off)
    off += struct.calcsize("<BBI")
    parts = struct.unpack_from(f"<{n_parts}I", data, off)
    off += 4 * n_parts
    n_cl, shots, seed, p = struct.unpack_from("<IIqd", data, off)
    off += struct.calcsize("<IIqd")
    gforms, outcomes = [], []
    for _ in range(n_cl):
        entry = []
        for n in parts:
            g, off = stab.GForm.from_bytes(n, data, off)
            entry.append(g)
        gforms.append(tuple(entry))
        outcomes.append(np.frombuffer(data, dtype="<u8", count=shots, offset=off).astype(np.int64))
        off += 8 * shots
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return ShadowRecord(Ensemble(parts, bool(ident)), tuple(gforms), np.array(outcomes), shots, NoiseModel(p), seed)


# --- estimation --------------------------------------------------------------------

def _split(values: np.ndarray, ensemble: Ensemble) -> list[np.ndarray]:
    n = ensemble.n_qubits
    out = []
    for off, size in zip(ensemble.offsets, ensemble.parts):
        out.append((values >> (n - off - size)) & ((1 << size) - 1))
    return out


def _check_betas(betas: np.ndarray, ensemble: Ensemble) -> None:
    for part in _split(betas, ensemble):
        if np.any(part == 0):
            raise ValueError("beta must have nonzero Hamming weight in every part (so <beta_p|0_p> = 0)")


def per_clifford_estimates(record: ShadowRecord, betas) -> np.ndarray:
    """(n_cliffords, n_betas) shot-averaged estimator values."""
    betas = np.atleast_1d(np.asarray(betas, dtype=np.int64))
    _check_betas(betas, record.ensemble)
    ens = record.ensemble
    beta_parts = _split(betas, ens)
    pref = ens.prefactor()
    out = np.empty((record.n_cliffords, betas.size), dtype=complex)
    for k, (entry, shots) in enumerate(zip(record.gforms, record.outcomes)):
        uniq, counts = np.unique(shots, return_counts=True)
        term = np.ones((uniq.size, betas.size), dtype=complex)
        for g, b, beta in zip(entry, _split(uniq, ens), beta_parts):
            a_beta = stab.gform_amplitudes(g, b[:, None], beta[None, :])
            a_zero = stab.gform_amplitudes(g, b, 0)
            term *= a_beta.conj() * a_zero[:, None]
        out[k] = pref * (counts @ term) / shots.size
    return out


def _summarize(samples: np.ndarray, median_of_means: int = 0) -> tuple[complex, float]:
    r = samples.shape[0]
    if median_of_means and r >= median_of_means:
        batches = np.array_split(samples, median_of_means)
        means = np.array([b.mean(axis=0) for b in batches])
        value = np.median(means.real, axis=0) + 1j * np.median(means.imag, axis=0)
    else:
        value = samples.mean(axis=0)
    if r > 1:
        err = np.sqrt((np.abs(samples - samples.mean(axis=0)) ** 2).sum(axis=0) / (r - 1) / r)
    else:
        err = np.full(samples.shape[1:], np.inf)
    return value, err


def _as_beta_int(beta, n: int) -> int:
    if isinstance(beta, (int, np.integer)):
        return int(beta)
    if isinstance(beta, tuple) and len(beta) == 2 and all(isinstance(b, str) for b in beta):
        beta = beta[0] + beta[1]
    bits = [int(c) for c in beta]
    if len(bits) != n:
        raise ValueError(f"beta has {len(bits)} bits, record has {n} qubits")
    v = 0
    for b in bits:
        v = (v << 1) | b
    return v


def estimate_basis_overlap(record: ShadowRecord, beta, median_of_means: int = 0) -> OverlapEstimate:
    """Estimate <beta|Psi> from the record; std_error from per-Clifford means."""
    b = _as_beta_int(beta, record.n_qubits)
    samples = per_clifford_estimates(record, [b])
    v, e = _summarize(samples, median_of_means)
    return OverlapEstimate(complex(v[0]), float(e[0]), record.n_cliffords)


def estimate_overlaps(record: ShadowRecord, betas, median_of_means: int = 0) -> list[OverlapEstimate]:
    b = [_as_beta_int(x, record.n_qubits) for x in betas]
    samples = per_clifford_estimates(record, b)
    v, e = _summarize(samples, median_of_means)
    return [OverlapEstimate(complex(x), float(s), record.n_cliffords) for x, s in zip(v, e)]


def estimate_overlap_ratio(record: ShadowRecord, beta_num, beta_den) -> OverlapEstimate:
    """<beta_num|Psi>/<beta_den|Psi> with a linearized (delta-method) standard error."""
    b = [_as_beta_int(x, record.n_qubits) for x in (beta_num, beta_den)]
    s = per_clifford_estimates(record, b)
    m = s.mean(axis=0)
    if m[1] == 0:
        raise ZeroDivisionError("denominator estimate is zero")
    r = m[0] / m[1]
    infl = (s[:, 0] - r * s[:, 1]) / m[1]
    n = s.shape[0]
    err = float(np.sqrt(np.sum(np.abs(infl - infl.mean()) ** 2) / (n - 1) / n)) if n > 1 else np.inf
    return OverlapEstimate(complex(r), err, n)


def _sector_qubit_ints(basis: SectorBasis, qubit_map: Sequence[int] | None):
    if qubit_map is None:
        return basis.qubit_indices, np.ones(basis.dim)
    from .trial import CircuitTrialSpec, _gather_signs
    spec = CircuitTrialSpec(basis.n_orb, 0, (), qubit_map=tuple(qubit_map))
    return _gather_signs(spec, basis)


def reconstruct_trial(record: ShadowRecord, n_orb: int, n_alpha: int, n_beta: int,
                      offline_rotation=None, qubit_map: Sequence[int] | None = None,
                      median_of_means: int = 0) -> ShadowReconstructed:
    """Estimate every sector amplitude and wrap them as a trial."""
    if record.n_cliffords == 0:
        raise ValueError("empty shadow record")
    if record.n_qubits != 2 * n_orb:
        raise ValueError(f"record has {record.n_qubits} qubits, sector needs {2 * n_orb}")
    try:
        basis = SectorBasis(n_orb, n_alpha, n_beta)
    except SectorTooLargeError as exc:
        raise SectorTooLargeError(f"{exc}; use sampling_overlap instead of full reconstruction") from None
    idx, sign = _sector_qubit_ints(basis, qubit_map)
    samples = per_clifford_estimates(record, idx)
    v, e = _summarize(samples, median_of_means)
    amps = AmplitudeMap(n_orb, n_alpha, n_beta, v * sign)
    meta = {"n_cliffords": record.n_cliffords, "shots": record.shots_per_clifford, "seed": record.seed,
            "depolarizing_p": record.noise.depolarizing_p, "ensemble": list(record.ensemble.parts)}
    return ShadowReconstructed(amplitudes=amps, std_errors=np.asarray(e), metadata=meta,
                               offline_rotation=offline_rotation)


def estimate_walker_overlap(trial: ShadowReconstructed, det: SlaterDeterminant) -> complex:
    """sum_beta conj(det amplitude) * amp(beta) = <phi|Psi_T>, the conjugate of trial_overlap."""
    return complex(np.conj(trial_overlap(trial, det)))


def variational_energy(trial: TrialWavefunction, ham: Hamiltonian) -> float:
    """Rayleigh quotient of the trial's sector vector (scale invariant)."""
    v = np.asarray(trial.sector_vector)
    nrm = np.vdot(v, v).real
    if nrm == 0.0:
        raise ValueError("reconstructed amplitudes have zero norm")
    op = SectorHamiltonian(ham, trial.basis)
    return float(np.vdot(v, op.matvec(v)).real / nrm)


def write_estimates_csv(trial: ShadowReconstructed, path) -> None:
    b = trial.basis
    errs = trial.std_errors if trial.std_errors is not None else np.zeros(b.dim)
    with open(path, "w") as f:
        f.write("beta_up,beta_dn,re,im,stderr\n")
        for i, a in enumerate(trial.amplitudes.vector):
            bu, bd = b.bits(i)
            f.write(f"{bu},{bd},{a.real:.17e},{a.imag:.17e},{errs[i]:.17e}\n")


# --- exact expectation oracle ---------------------------------------------------------

def exact_expectation(tau_amplitudes: np.ndarray, ensemble: Ensemble, betas, noise_p: float = 0.0) -> np.ndarray:
    """Infinite-sample value of the estimator for every beta.

    Uses that the estimator depends on U only through its measurement form, and the
    measurement forms of a uniform Clifford are uniformly distributed over
    ``stab.enumerate_gforms``.
    """
    betas = np.atleast_1d(np.asarray(betas, dtype=np.int64))
    _check_betas(betas, ensemble)
    per_part = [stab.enumerate_gforms(n) for n in ensemble.parts]
    beta_parts = _split(betas, ensemble)
    n = ensemble.n_qubits
    outcomes = np.arange(2**n, dtype=np.int64)
    out_parts = _split(outcomes, ensemble)
    pref = ensemble.prefactor()
    # per-part amplitude tables conj(<b|G|beta>) <b|G|0>, shape (n_forms, 2^N_p, n_betas)
    tables = []
    for forms, b, beta in zip(per_part, out_parts, beta_parts):
        local = np.arange(2 ** forms[0].n, dtype=np.int64)
        t = np.array([stab.gform_amplitudes(g, local[:, None], beta[None, :]).conj()
                      * stab.gform_amplitudes(g, local, 0)[:, None] for g in forms])
        tables.append(t)
    total = np.zeros(betas.size, dtype=complex)
    for combo in itertools.product(*[range(len(f)) for f in per_part]):
        gforms = [per_part[i][c] for i, c in enumerate(combo)]
        probs = np.abs(apply_parts(gforms, tau_amplitudes, ensemble.parts)) ** 2
        probs = (1.0 - noise_p) * probs + noise_p / probs.size
        term = np.ones((outcomes.size, betas.size), dtype=complex)
        for i, c in enumerate(combo):
            term *= tables[i][c][out_parts[i]]
        total += probs @ term
    weight = np.prod([1.0 / len(f) for f in per_part])
    return pref * weight * total


def tau_from_amplitudes(psi: np.ndarray) -> StateVector:
    """(|0> + |psi>)/sqrt(2) for a normalized psi with no weight on |0>."""
    psi = np.asarray(psi, dtype=complex)
    n = int(np.log2(psi.size))
    if abs(psi[0]) > 1e-12:
        raise ValueError("psi must be orthogonal to |0...0>")
    tau = psi / np.linalg.norm(psi)
    tau = tau.copy()
    tau[0] = 1.0
    return StateVector(n, tau / np.sqrt(2))


# --- sampling-based overlap ------------------------------------------------------------

def sampling_overlap(psi: np.ndarray | Callable, phi: np.ndarray | tuple, n_samples: int,
                     rng: np.random.Generator) -> OverlapEstimate:
    """Estimate <phi|psi> as the mean of psi(x)/phi(x) over x ~ |phi(x)|^2.

    ``psi`` is an amplitude array or a callable on integer arrays. ``phi`` is a
    normalized amplitude array (sampled exactly) or a pair (amplitude_fn, sampler)
    with ``sampler(n, rng)`` returning integer samples.
    """
    if isinstance(phi, tuple):
        phi_fn, sampler = phi
        xs = np.asarray(sampler(n_samples, rng), dtype=np.int64)
    else:
        phi_arr = np.asarray(phi, dtype=complex)
        p = np.abs(phi_arr) ** 2
        if not np.isclose(p.sum(), 1.0, atol=1e-10):
            raise ValueError("phi must be normalized to sample from |phi|^2")
        xs = rng.choice(p.size, size=n_samples, p=p / p.sum())
        phi_fn = lambda x: phi_arr[x]
    psi_fn = psi if callable(psi) else (lambda x, a=np.asarray(psi, dtype=complex): a[x])
    den = np.asarray(phi_fn(xs), dtype=complex)
    ok = den != 0
    rejected = int(np.count_nonzero(~ok))
    if rejected > 0.5 * n_samples:
        raise ZeroDivisionError(f"{rejected} of {n_samples} samples hit zero phi amplitudes")
    vals = np.asarray(psi_fn(xs[ok]), dtype=complex) / den[ok]
    n = vals.size
    err = float(np.sqrt(np.sum(np.abs(vals - vals.mean()) ** 2) / (n - 1) / n)) if n > 1 else np.inf
    return OverlapEstimate(complex(vals.mean()), err, n)
