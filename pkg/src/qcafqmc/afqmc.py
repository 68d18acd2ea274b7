"""Phaseless AFQMC with a hybrid (overlap-ratio) weight update.

The two-body term is written as 1/2 sum_g (L^_g - m_g)^2 with mean-field shifts
m_g = <Psi_T|L^_g|Psi_T>, so that

    H = E0' + sum_pq h1'_pq E_pq + 1/2 sum_g (L^_g - m_g)^2,
    h1' = h1 - 1/2 sum_g L_g L_g + sum_g m_g L_g,   E0' = e_core - 1/2 sum_g m_g^2,

and exp(-dt/2 (L^-m)^2) is decoupled with v^_g = i (L^_g - m_g).
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .hamio import CholeskyFactors, Hamiltonian, cholesky_factorize
from .slater import OrthogonalWalkerError, SlaterDeterminant, Walker, expm
from .trial import SingleDet, TrialWavefunction, make_evaluator

CHECKPOINT_MAGIC = b"AFQM v1\n"
TAYLOR_ORDER = 6
WALKER_BLOCK = 64


@dataclass(frozen=True)
class Propagator:
    dt: float
    half_onebody: np.ndarray  # exp(-dt/2 h1'), same for both spins
    chol_scaled: np.ndarray  # sqrt(dt) * L_g
    mf_shifts: np.ndarray  # m_g
    h1_prime: np.ndarray
    e0_prime: float

    @property
    def n_chol(self) -> int:
        return self.chol_scaled.shape[0]


def mean_field_shifts(trial: TrialWavefunction, chol: CholeskyFactors) -> np.ndarray:
    """<Psi_T|L^_g|Psi_T>/<Psi_T|Psi_T> for every Cholesky vector."""
    lv = np.asarray(chol.vectors)
    if isinstance(trial, SingleDet):
        t = trial.rotated_det
        out = np.zeros(lv.shape[0], dtype=complex)
        for blk in t.blocks:
            if blk.shape[1]:
                p = blk @ np.linalg.solve(blk.conj().T @ blk, blk.conj().T)
                out += np.einsum("gpq,qp->g", lv, p)
        return out.real
    b = trial.basis
    psi = np.asarray(trial.sector_vector)
    nrm = np.vdot(psi, psi).real
    return np.array([np.vdot(psi, b.apply_onebody(l, l, psi)).real / nrm for l in lv])


def build_propagator(ham: Hamiltonian, chol: CholeskyFactors, trial: TrialWavefunction, dt: float) -> Propagator:
    if not dt > 0:
        raise ValueError("dt must be positive")
    lv = np.asarray(chol.vectors)
    m = mean_field_shifts(trial, chol)
    h1p = ham.h1 - 0.5 * np.einsum("gpr,grq->pq", lv, lv) + np.einsum("g,gpq->pq", m, lv)
    e0p = ham.e_core - 0.5 * float(np.sum(m**2))
    return Propagator(dt, expm(-0.5 * dt * h1p).real, np.sqrt(dt) * lv, m.astype(complex), h1p, e0p)


# --- walker batches ---------------------------------------------------------------

@dataclass
class WalkerBatch:
    ups: np.ndarray  # (nw, n_orb, n_alpha)
    dns: np.ndarray  # (nw, n_orb, n_beta)
    weights: np.ndarray
    overlaps: np.ndarray
    log_scale: np.ndarray

    @property
    def n(self) -> int:
        return self.weights.size

    def take(self, idx: np.ndarray) -> "WalkerBatch":
        return WalkerBatch(self.ups[idx].copy(), self.dns[idx].copy(), self.weights[idx].copy(),
                           self.overlaps[idx].copy(), self.log_scale[idx].copy())

    def walkers(self) -> list[Walker]:
        return [Walker(SlaterDeterminant(u, d), float(w), complex(o), complex(s))
                for u, d, w, o, s in zip(self.ups, self.dns, self.weights, self.overlaps, self.log_scale)]

    @classmethod
    def from_walkers(cls, walkers: list[Walker]) -> "WalkerBatch":
        return cls(np.array([w.det.up for w in walkers]), np.array([w.det.dn for w in walkers]),
                   np.array([w.weight for w in walkers], dtype=float),
                   np.array([w.overlap_cache for w in walkers], dtype=complex),
                   np.array([w.log_scale for w in walkers], dtype=complex))


def initial_determinant(trial: TrialWavefunction) -> SlaterDeterminant:
    """Trial determinant for SingleDet, otherwise the trial's largest configuration."""
    if isinstance(trial, SingleDet):
        return trial.rotated_det
    v = np.asarray(trial.sector_vector)
    i = int(np.argmax(np.abs(v)))
    occ_up, occ_dn = trial.basis.config(i)
    return SlaterDeterminant.from_occupations(trial.n_orb, occ_up, occ_dn)


def _taylor_apply(v: np.ndarray, blk: np.ndarray, order: int = TAYLOR_ORDER) -> np.ndarray:
    out = blk.copy()
    term = blk
    for k in range(1, order + 1):
        term = v @ term / k
        out = out + term
    return out


def _propagate_batch(ups, dns, weights, overlaps, x, prop: Propagator, evaluator, e_shift: float,
                     fb_cap: float):
    """One step for a batch; ``x`` are the standard-normal draws (nw, n_chol)."""
    sdt = np.sqrt(prop.dt)
    _, _, fb = evaluator.evaluate(ups, dns, need_energy=False, need_bias=True)
    xbar = -1j * sdt * (fb - prop.mf_shifts)
    if fb_cap > 0:
        mag = np.abs(xbar)
        xbar = np.where(mag > fb_cap, xbar / np.maximum(mag, 1e-300) * fb_cap, xbar)
    xs = x - xbar
    v = 1j * np.einsum("wg,gpq->wpq", xs, prop.chol_scaled, optimize=True)
    b = prop.half_onebody
    new_u = b @ _taylor_apply(v, b @ ups)
    new_d = b @ _taylor_apply(v, b @ dns)
    ov_new = evaluator.overlap(new_u, new_d)
    scalar = np.exp(-1j * sdt * (xs @ prop.mf_shifts))
    with np.errstate(all="ignore"):
        s = ov_new / overlaps * scalar
        imp = s * np.exp(np.sum(x * xbar, axis=1) - 0.5 * np.sum(xbar * xbar, axis=1))
        imp = imp * np.exp(-prop.dt * (prop.e0_prime - e_shift))
        factor = np.abs(imp) * np.maximum(0.0, np.cos(np.angle(s)))
    factor = np.where(np.isfinite(factor), factor, 0.0)
    new_w = weights * factor
    dead = (new_w <= 0) | ~np.isfinite(ov_new) | (ov_new == 0)
    new_w = np.where(dead, 0.0, new_w)
    return new_u, new_d, new_w, np.where(dead, 1.0, ov_new)


def propagate_step(walker: Walker, prop: Propagator, trial: TrialWavefunction, rng: np.random.Generator,
                   ham: Hamiltonian | None = None, chol: CholeskyFactors | None = None,
                   e_shift: float = 0.0, fb_cap: float = 1.0) -> Walker:
    """Single-walker step (reference interface; the engine uses batches)."""
    if not walker.weight > 0:
        raise ValueError("walker weight must be positive")
    if walker.overlap_cache == 0:
        raise OrthogonalWalkerError("walker overlap cache is zero")
    if chol is None:
        chol = CholeskyFactors(prop.chol_scaled / np.sqrt(prop.dt), 0.0)
    if ham is None:
        raise ValueError("ham is required to build the trial evaluator")
    ev = make_evaluator(trial, ham, chol)
    x = rng.standard_normal((1, prop.n_chol))
    u, d, w, o = _propagate_batch(walker.det.up[None], walker.det.dn[None], np.array([walker.weight]),
                                  np.array([walker.overlap_cache]), x, prop, ev, e_shift, fb_cap)
    return Walker(SlaterDeterminant(u[0], d[0]), float(w[0]), complex(o[0]), walker.log_scale)


def hybrid_weight_factor(ratio: complex, importance_magnitude: float = 1.0) -> float:
    """|I| max(0, cos arg S) for overlap ratio S."""
    return float(importance_magnitude * max(0.0, np.cos(np.angle(ratio))))


def orthonormalize_batch(batch: WalkerBatch, evaluator) -> None:
    for name in ("ups", "dns"):
        blk = getattr(batch, name)
        if blk.shape[-1] == 0:
            continue
        q, r = np.linalg.qr(blk)
        d = np.diagonal(r, axis1=-2, axis2=-1)
        phase = np.where(d == 0, 1.0, d / np.where(d == 0, 1.0, np.abs(d)))
        q = q * phase[:, None, :]
        with np.errstate(divide="ignore"):
            batch.log_scale += np.sum(np.log(np.abs(d)), axis=1)
        setattr(batch, name, q)
    alive = batch.weights > 0
    ov = evaluator.overlap(batch.ups, batch.dns)
    batch.overlaps = np.where(alive, ov, 1.0)


def population_control(weights: np.ndarray, target: int, rng: np.random.Generator,
                       cap_factor: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Systematic comb. Returns (parent indices, new weights); total weight is preserved."""
    w = np.asarray(weights, dtype=float)
    if target < 1:
        raise ValueError("target population must be at least 1")
    total = w.sum()
    if not total > 0:
        raise ValueError("zero total weight: all walkers dead")
    alive = w > 0
    if cap_factor > 0:
        cap = cap_factor * total / max(1, int(alive.sum()))
        w = np.minimum(w, cap)
        w *= total / w.sum()
    cum = np.cumsum(w)
    cum[-1] = total
    pos = (rng.random() + np.arange(target)) * (total / target)
    idx = np.searchsorted(cum, pos, side="right")
    idx = np.minimum(idx, w.size - 1)
    return idx, np.full(target, total / target)


def measure_mixed_energy(weights: np.ndarray, local_energies: np.ndarray) -> tuple[float, dict]:
    """Weighted mean of Re E_loc over live walkers."""
    w = np.asarray(weights, dtype=float)
    e = np.asarray(local_energies, dtype=complex)
    live = w > 0
    tw = w[live].sum()
    if not tw > 0:
        raise ValueError("all walkers dead")
    num = float(np.sum(w[live] * e[live].real))
    imag = float(np.sum(w[live] * e[live].imag))
    return num / tw, {"numerator": num, "weight": float(tw), "imag": imag / tw, "n_live": int(live.sum())}


def measure_walkers(walkers: list[Walker], trial: TrialWavefunction, ham: Hamiltonian) -> tuple[float, dict]:
    ev = make_evaluator(trial, ham)
    ups = np.array([w.det.up for w in walkers])
    dns = np.array([w.det.dn for w in walkers])
    _, e, _ = ev.evaluate(ups, dns, need_energy=True, need_bias=False)
    return measure_mixed_energy(np.array([w.weight for w in walkers]), e)


# --- energy series and statistics ----------------------------------------------------

@dataclass
class EnergyTimeSeries:
    tau: list = field(default_factory=list)
    e_num: list = field(default_factory=list)
    weight: list = field(default_factory=list)
    nwalkers: list = field(default_factory=list)
    e_imag: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, tau: float, e_num: float, weight: float, nwalkers: int, e_imag: float = 0.0) -> None:
        if self.tau and not tau > self.tau[-1]:
            raise ValueError("tau must increase strictly")
        if not weight > 0:
            raise ValueError("row weight must be positive")
        self.tau.append(float(tau))
        self.e_num.append(float(e_num))
        self.weight.append(float(weight))
        self.nwalkers.append(int(nwalkers))
        self.e_imag.append(float(e_imag))

    def __len__(self) -> int:
        return len(self.tau)

    def energies(self) -> np.ndarray:
        return np.array(self.e_num) / np.array(self.weight)

    def to_csv(self) -> str:
        lines = ["tau,e_num,weight,nwalkers"]
        for t, e, w, n in zip(self.tau, self.e_num, self.weight, self.nwalkers):
            lines.append(f"{t:.10f},{e:.17e},{w:.17e},{n}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "EnergyTimeSeries":
        rows = text.strip().splitlines()
        if rows[0].strip() != "tau,e_num,weight,nwalkers":
            raise ValueError("unexpected energy series header")
        s = cls()
        for r in rows[1:]:
            t, e, w, n = r.split(",")
            s.append(float(t), float(e), float(w), int(n))
        return s


@dataclass(frozen=True)
class BlockingResult:
    mean: float
    std_error: float
    block_report: list  # (block_size, n_blocks, std_error, std_error_error)
    optimal_block: int


def reblock(values: np.ndarray) -> list[tuple[int, int, float, float]]:
    x = np.asarray(values, dtype=float)
    out = []
    size = 1
    while x.size >= 2:
        n = x.size
        se = float(np.std(x, ddof=1) / np.sqrt(n))
        out.append((size, n, se, se / np.sqrt(2 * (n - 1))))
        m = n // 2
        x = 0.5 * (x[: 2 * m: 2] + x[1: 2 * m: 2])
        size *= 2
    return out


def blocking_analysis(series: EnergyTimeSeries | np.ndarray, t_equil: float = 0.0,
                      min_rows: int = 32) -> BlockingResult:
    """Reblocking over power-of-two blocks; plateau picked by the B^3 > 2 N (se_B/se_1)^4 rule."""
    if isinstance(series, EnergyTimeSeries):
        tau = np.array(series.tau)
        keep = tau >= t_equil
        num = np.array(series.e_num)[keep]
        wts = np.array(series.weight)[keep]
        vals = num / wts if num.size else num
        mean = float(num.sum() / wts.sum()) if num.size else float("nan")
    else:
        vals = np.asarray(series, dtype=float)
        mean = float(vals.mean()) if vals.size else float("nan")
    if vals.size < min_rows:
        raise ValueError(f"need at least {min_rows} post-equilibration rows, have {vals.size}")
    report = reblock(vals)
    se0 = report[0][2]
    if se0 == 0.0:
        return BlockingResult(mean, 0.0, report, 1)
    n0 = vals.size
    chosen = None
    for size, n, se, _ in report:
        if size**3 > 2 * n0 * (se / se0) ** 4:
            chosen = (size, se)
            break
    if chosen is None:
        chosen = (report[-1][0], report[-1][2])
    return BlockingResult(mean, float(chosen[1]), report, int(chosen[0]))


# --- engine ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AFQMCParams:
    dt: float = 0.005
    n_walkers: int = 1024
    t_equil: float = 2.0
    n_measure_steps: int = 10000
    n_meas: int = 2
    ortho_every: int = 10
    pop_every: int = 20
    seed: int = 0
    fb_cap: float = 1.0
    chol_tol: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_walkers < 1 or self.n_meas < 1 or self.ortho_every < 1 or self.pop_every < 1:
            raise ValueError("walker count and intervals must be positive")
        if self.n_measure_steps < 0 or self.t_equil < 0:
            raise ValueError("step counts must be nonnegative")

    @property
    def n_equil_steps(self) -> int:
        return int(round(self.t_equil / self.dt))

    @property
    def n_steps(self) -> int:
        return self.n_equil_steps + self.n_measure_steps


@dataclass
class EngineState:
    step: int
    e_shift: float
    batch: WalkerBatch
    series: EnergyTimeSeries
    n_killed: int = 0


def _step_rng(seed: int, step: int, purpose: int) -> np.random.Generator:
    key = np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, int(purpose), int(step)]))


def _chunks(n: int, block: int = WALKER_BLOCK) -> list[slice]:
    # fixed block boundaries: every kernel sees the same inputs whatever the thread count
    return [slice(a, min(a + block, n)) for a in range(0, n, block)]


def _parallel(fn: Callable, n: int, n_threads: int, pool: ThreadPoolExecutor | None):
    parts = _chunks(n)
    if pool is None or len(parts) == 1:
        return [fn(sl) for sl in parts]
    return list(pool.map(fn, parts))


def initial_state(trial: TrialWavefunction, evaluator, params: AFQMCParams, e_trial: float) -> EngineState:
    d0 = initial_determinant(trial)
    nw = params.n_walkers
    ups = np.repeat(d0.up[None], nw, axis=0)
    dns = np.repeat(d0.dn[None], nw, axis=0)
    ov = evaluator.overlap(ups, dns)
    if np.any(ov == 0):
        raise OrthogonalWalkerError("initial determinant is orthogonal to the trial")
    batch = WalkerBatch(ups, dns, np.ones(nw), ov, np.zeros(nw, dtype=complex))
    return EngineState(0, float(e_trial), batch, EnergyTimeSeries())


def config_hash(params: AFQMCParams, extra: dict | None = None) -> str:
    doc = {"params": asdict(params), "extra": extra or {}}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def run(ham: Hamiltonian, trial: TrialWavefunction, params: AFQMCParams, chol: CholeskyFactors | None = None,
        n_threads: int = 1, resume: EngineState | None = None, checkpoint_path=None,
        stop_after: int | None = None, progress: Callable | None = None) -> EngineState:
    """Equilibrate and measure; returns the final engine state (series in ``state.series``).

    Noise for step s comes from a Philox stream keyed by the seed with counter s, drawn
    for all walkers in walker order, so results do not depend on ``n_threads``.
    ``stop_after`` ends the run after that many total steps (used to test resume).
    """
    chol = chol or cholesky_factorize(ham, params.chol_tol)
    prop = build_propagator(ham, chol, trial, params.dt)
    ev = make_evaluator(trial, ham, chol)
    if resume is None:
        e_t = _trial_energy(trial, ham)
        state = initial_state(trial, ev, params, e_t)
    else:
        state = resume
    state.series.metadata.update({"seed": params.seed, "config_hash": config_hash(params)})
    end = params.n_steps if stop_after is None else min(params.n_steps, stop_after)
    pool = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None
    try:
        while state.step < end:
            _advance(state, prop, ev, params, n_threads, pool)
            if progress is not None:
                progress(state)
            if checkpoint_path and params.checkpoint_every and state.step % params.checkpoint_every == 0:
                write_checkpoint(state, checkpoint_path)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


def _trial_energy(trial: TrialWavefunction, ham: Hamiltonian) -> float:
    if isinstance(trial, SingleDet):
        ev = make_evaluator(trial, ham)
        d = trial.rotated_det
        _, e, _ = ev.evaluate(d.up[None], d.dn[None], need_bias=False)
        return float(e[0].real)
    from .oracle import variational_energy_exact
    return variational_energy_exact(ham, trial.sector_vector, trial.basis)


def _advance(state: EngineState, prop: Propagator, ev, params: AFQMCParams, n_threads: int, pool) -> None:
    b = state.batch
    step = state.step + 1
    x = _step_rng(params.seed, step, 0).standard_normal((b.n, prop.n_chol))

    def work(sl):
        return _propagate_batch(b.ups[sl], b.dns[sl], b.weights[sl], b.overlaps[sl], x[sl], prop, ev,
                                state.e_shift, params.fb_cap)

    res = _parallel(work, b.n, n_threads, pool)
    b.ups = np.concatenate([r[0] for r in res])
    b.dns = np.concatenate([r[1] for r in res])
    new_w = np.concatenate([r[2] for r in res])
    state.n_killed += int(np.count_nonzero((new_w == 0) & (b.weights > 0)))
    b.weights = new_w
    b.overlaps = np.concatenate([r[3] for r in res])
    state.step = step
    if step % params.ortho_every == 0:
        orthonormalize_batch(b, ev)
    if step % params.n_meas == 0:
        live = b.weights > 0
        if not live.any():
            raise RuntimeError("all walkers died")

        def meas(sl):
            return ev.evaluate(b.ups[sl], b.dns[sl], need_energy=True, need_bias=False)[1]

        e = np.concatenate(_parallel(meas, b.n, n_threads, pool))
        e = np.where(live, e, 0.0)
        energy, comp = measure_mixed_energy(b.weights, e)
        state.series.append(step * params.dt, comp["numerator"], comp["weight"], comp["n_live"], comp["imag"])
        if np.isfinite(energy):
            state.e_shift = energy
    if step % params.pop_every == 0:
        idx, w = population_control(b.weights, params.n_walkers, _step_rng(params.seed, step, 1))
        nb = b.take(idx)
        nb.weights = w
        state.batch = nb


def summarize(state: EngineState, params: AFQMCParams) -> dict:
    res = blocking_analysis(state.series, params.t_equil)
    e = np.array(state.series.e_imag)
    return {
        "mean": res.mean, "std_error": res.std_error, "optimal_block": res.optimal_block,
        "block_report": [list(r) for r in res.block_report],
        "mean_imag": float(e.mean()) if e.size else 0.0,
        "n_killed": state.n_killed, "seed": params.seed, "config_hash": config_hash(params),
    }


# --- checkpoints ------------------------------------------------------------------------

def write_checkpoint(state: EngineState, path) -> None:
    b = state.batch
    s = state.series
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        nw, n, ka = b.ups.shape
        kb = b.dns.shape[2]
        f.write(struct.pack("<6qd", nw, n, ka, kb, state.step, state.n_killed, state.e_shift))
        for arr in (b.ups, b.dns, b.overlaps, b.log_scale):
            f.write(np.ascontiguousarray(arr, dtype="<c16").tobytes())
        f.write(np.ascontiguousarray(b.weights, dtype="<f8").tobytes())
        f.write(struct.pack("<q", len(s)))
        rows = np.array([s.tau, s.e_num, s.weight, s.nwalkers, s.e_imag], dtype="<f8").T
        f.write(np.ascontiguousarray(rows).tobytes())


def read_checkpoint(path) -> EngineState:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an AFQM v1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    nw, n, ka, kb, step, killed, e_shift = struct.unpack_from("<6qd", data, off)
    off += struct.calcsize("<6qd")

    def take(count, dtype, shape):
        nonlocal off
        a = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape).copy()
        off += a.nbytes
        return a

    ups = take(nw * n * ka, "<c16", (nw, n, ka))
    dns = take(nw * n * kb, "<c16", (nw, n, kb))
    ov = take(nw, "<c16", (nw,))
    ls = take(nw, "<c16", (nw,))
    w = take(nw, "<f8", (nw,))
    (nrows,) = struct.unpack_from("<q", data, off)
    off += 8
    rows = take(nrows * 5, "<f8", (nrows, 5))
    series = EnergyTimeSeries()
    for t, e, wt, nl, im in rows:
        series.append(t, e, wt, int(nl), im)
    return EngineState(int(step), float(e_shift), WalkerBatch(ups, dns, w, ov, ls), series, int(killed))
