"""Command-line entry point: ``qcafqmc <task> --config run.yaml``."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import afqmc, embed, shadows, trial as trial_mod
from .config import (HARTREE_TO_KCAL, TASKS, ConfigError, RunConfig, atomization_energy, config_from_dict,
                     load_config)
from .hamio import Hamiltonian, cholesky_factorize, read_fcidump
from .oracle import SectorBasis, fci_solve
from .qsim import NoiseModel
from .slater import SlaterDeterminant, read_slater

FORMATS = {"fcidump": "molpro", "slater": "SLATER v1", "circuit": f"{trial_mod.CIRCUIT_FORMAT} v{trial_mod.CIRCUIT_VERSION}",
           "shadow": "SHDW v1", "checkpoint": "AFQM v1", "series": "csv tau,e_num,weight,nwalkers"}


def config_hash(cfg: RunConfig) -> str:
    data = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in ("base_dir", "threads", "output_dir")}
    for key in ("fcidump", "trial_file", "shadow_record", "series"):
        p = cfg.path(data.get(key))
        if p is not None:
            data[key + "_sha256"] = hashlib.sha256(p.read_bytes()).hexdigest()
            data[key] = Path(data[key]).name
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=list).encode()).hexdigest()[:16]


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _stamp(cfg: RunConfig, doc: dict) -> dict:
    doc = dict(doc)
    doc.update({"config_hash": config_hash(cfg), "seed": cfg.seed, "task": cfg.task, "formats": FORMATS,
                "version": __version__})
    return doc


def _ham(cfg: RunConfig) -> Hamiltonian:
    return read_fcidump(cfg.path(cfg.fcidump))


def _default_template(ham: Hamiltonian, cfg: RunConfig) -> trial_mod.CircuitTrialSpec:
    if ham.n_alpha != ham.n_beta:
        raise ConfigError("circuit trials need n_alpha == n_beta")
    n = ham.n_orb
    return trial_mod.CircuitTrialSpec(n, ham.n_alpha, (0.1,) * ham.n_alpha,
                                      trial_mod.default_layers(n, cfg.circuit_layers),
                                      rotation_angles=(0.0,) * (n * (n - 1) // 2))


def optimized_circuit(ham: Hamiltonian, cfg: RunConfig) -> trial_mod.OptimizationResult:
    if cfg.trial_file is not None:
        spec = trial_mod.read_circuit_spec(cfg.path(cfg.trial_file))
        return trial_mod.OptimizationResult(spec, trial_mod.ansatz_energy(ham, spec), float("nan"), 0, True)
    return trial_mod.optimize_pp(ham, _default_template(ham, cfg), restarts=cfg.optimize_restarts,
                                 jitter=cfg.optimize_jitter, seed=cfg.seed)


def build_trial(ham: Hamiltonian, cfg: RunConfig, out: Path | None = None) -> trial_mod.TrialWavefunction:
    kind = cfg.trial or "rhf"
    if kind == "rhf":
        return trial_mod.SingleDet(det=SlaterDeterminant.from_occupations(ham.n_orb, range(ham.n_alpha), range(ham.n_beta)))
    if kind == "fci":
        return trial_mod.exact_trial(ham)
    if kind == "slater":
        _need(cfg, "trial_file")
        return trial_mod.SingleDet(det=read_slater(cfg.path(cfg.trial_file)))
    if kind == "amplitudes":
        _need(cfg, "trial_file")
        return trial_mod.MultiDet(amplitudes=trial_mod.read_amplitudes(cfg.path(cfg.trial_file), ham.n_orb))
    if kind == "circuit":
        res = optimized_circuit(ham, cfg)
        if out is not None:
            trial_mod.write_circuit_spec(res.spec, out / "trial.json")
        return trial_mod.circuit_trial(res.spec)
    raise ConfigError(f"trial kind {kind!r} is not valid for task {cfg.task}")


def _need(cfg: RunConfig, key: str) -> None:
    if getattr(cfg, key) is None:
        raise ConfigError(f"key '{key}' is required for task {cfg.task} with trial {cfg.trial!r}")


def _afqmc_params(cfg: RunConfig) -> afqmc.AFQMCParams:
    return afqmc.AFQMCParams(dt=cfg.dt, n_walkers=cfg.walkers, t_equil=cfg.equilibration, n_measure_steps=cfg.n_steps,
                             n_meas=cfg.measure_every, ortho_every=cfg.ortho_every, pop_every=cfg.pop_every,
                             seed=cfg.seed, fb_cap=cfg.force_bias_cap, chol_tol=cfg.cholesky_tol,
                             checkpoint_every=cfg.checkpoint_every)


def _run_afqmc(ham, tr, cfg: RunConfig, out: Path, resume: str | None) -> dict:
    params = _afqmc_params(cfg)
    chol = cholesky_factorize(ham, cfg.cholesky_tol)
    state = afqmc.read_checkpoint(resume) if resume else None
    ckpt = cfg.path(cfg.checkpoint) if cfg.checkpoint else None
    state = afqmc.run(ham, tr, params, chol=chol, n_threads=cfg.threads, resume=state, checkpoint_path=ckpt)
    if ckpt is not None:
        afqmc.write_checkpoint(state, ckpt)
    (out / "energy.csv").write_text(state.series.to_csv())
    n_rows = int(np.sum(np.array(state.series.tau) >= params.t_equil))
    doc = {"n_samples": n_rows, "n_killed": state.n_killed, "n_chol": len(chol)}
    if n_rows >= 32:
        res = afqmc.blocking_analysis(state.series, params.t_equil)
        doc.update({"energy": res.mean, "std_error": res.std_error, "optimal_block": res.optimal_block,
                    "block_report": [list(r) for r in res.block_report]})
    else:
        doc.update({"energy": None, "std_error": None})
    return doc


def task_fci(cfg: RunConfig, out: Path, args) -> dict:
    ham = _ham(cfg)
    e, vec = fci_solve(ham)
    amps = trial_mod.AmplitudeMap(ham.n_orb, ham.n_alpha, ham.n_beta, vec)
    trial_mod.write_amplitudes(amps, out / "fci_vector.txt", tol=1e-14)
    return {"energy": e, "std_error": 0.0, "n_samples": 1, "sector_dim": amps.basis.dim}


def task_afqmc(cfg: RunConfig, out: Path, args) -> dict:
    ham = _ham(cfg)
    tr = build_trial(ham, cfg, out)
    doc = _run_afqmc(ham, tr, cfg, out, args.resume)
    doc["trial"] = cfg.trial or "rhf"
    return doc


def _tau_and_spec(ham: Hamiltonian, cfg: RunConfig, out: Path):
    res = optimized_circuit(ham, cfg)
    trial_mod.write_circuit_spec(res.spec, out / "trial.json")
    return trial_mod.prepare_tau(res.spec), res


def _ensemble(cfg: RunConfig, n_qubits: int) -> shadows.Ensemble:
    if cfg.ensemble == "partitioned":
        return shadows.Ensemble((n_qubits // 2, n_qubits // 2))
    return shadows.Ensemble((n_qubits,))


def task_shadows_acquire(cfg: RunConfig, out: Path, args) -> dict:
    ham = _ham(cfg)
    tau, res = _tau_and_spec(ham, cfg, out)
    rec = shadows.acquire_shadow(tau, _ensemble(cfg, tau.n_qubits), cfg.n_cliffords, cfg.shots,
                                 NoiseModel(cfg.depolarizing_p), cfg.seed, cfg.threads)
    shadows.write_shadow(rec, out / "record.shdw")
    return {"n_cliffords": rec.n_cliffords, "shots": rec.shots_per_clifford, "n_samples": rec.n_cliffords,
            "trial_energy": res.energy, "energy": None, "std_error": None}


def _reconstruct(ham: Hamiltonian, cfg: RunConfig, out: Path) -> shadows.ShadowReconstructed:
    res = optimized_circuit(ham, cfg)
    trial_mod.write_circuit_spec(res.spec, out / "trial.json")
    rot = res.spec.rotation()
    rot = None if rot is None else (rot, rot)
    if cfg.shadow_mode == "exact":
        amps = trial_mod.build_pp_state(res.spec)
        tr = trial_mod.ShadowReconstructed(amplitudes=amps, std_errors=np.zeros(amps.basis.dim),
                                           metadata={"mode": "exact"}, offline_rotation=rot)
    else:
        if cfg.shadow_record is not None:
            rec = shadows.read_shadow(cfg.path(cfg.shadow_record))
        else:
            tau = trial_mod.prepare_tau(res.spec)
            rec = shadows.acquire_shadow(tau, _ensemble(cfg, tau.n_qubits), cfg.n_cliffords, cfg.shots,
                                         NoiseModel(cfg.depolarizing_p), cfg.seed, cfg.threads)
            shadows.write_shadow(rec, out / "record.shdw")
        tr = shadows.reconstruct_trial(rec, ham.n_orb, ham.n_alpha, ham.n_beta, offline_rotation=rot,
                                       qubit_map=res.spec.qubit_map, median_of_means=cfg.median_of_means)
    shadows.write_estimates_csv(tr, out / "estimates.csv")
    return tr


def task_shadows_estimate(cfg: RunConfig, out: Path, args) -> dict:
    ham = _ham(cfg)
    tr = _reconstruct(ham, cfg, out)
    ev = shadows.variational_energy(tr, ham)
    return {"variational_energy": ev, "energy": ev, "std_error": None,
            "n_samples": int(tr.metadata.get("n_cliffords", 0))}


def task_qcafqmc(cfg: RunConfig, out: Path, args) -> dict:
    ham = _ham(cfg)
    tr = _reconstruct(ham, cfg, out)
    doc = _run_afqmc(ham, tr, cfg, out, args.resume)
    doc["variational_energy"] = shadows.variational_energy(tr, ham)
    return doc


def task_embed_check(cfg: RunConfig, out: Path, args) -> dict:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    ham = None
    if cfg.active is not None:
        part = embed.SpacePartition(cfg.active, cfg.core, cfg.virtual)
    else:
        part = embed.SpacePartition(active=(1, 2, 4, 5), core=(3,), virtual=(0,))
    if cfg.active is not None and cfg.fcidump is not None:
        ham = _ham(cfg)
        part.validate(ham.n_orb)
        na, nb = ham.n_alpha - len(part.core), ham.n_beta - len(part.core)
    else:
        na = nb = max(1, len(part.active) // 2)
    from .hamio import random_psd_hamiltonian
    nc = len(part.core)
    ba = SectorBasis(len(part.active), na, nb)
    core_det = embed.core_determinant(part)
    worst_id = 0.0
    for _ in range(cfg.embed_instances):
        phi = SlaterDeterminant.random(part.n_orb, na + nc, nb + nc, rng)
        v = rng.normal(size=ba.dim) + 1j * rng.normal(size=ba.dim)
        tr = trial_mod.MultiDet(amplitudes=trial_mod.AmplitudeMap(ba.n_orb, na, nb, v))
        bf, vf = embed.embed_vector(v, ba, core_det, part)
        lhs = embed.full_space_overlap(vf, bf, phi)
        rhs = embed.embedded_overlap(tr, phi, core_det, part)
        worst_id = max(worst_id, abs(lhs - rhs) / max(1.0, abs(lhs)))
    if ham is None:
        ham = random_psd_hamiltonian(part.n_orb, na + nc, nb + nc, rng)
    phi = SlaterDeterminant.random(part.n_orb, na + nc, nb + nc, rng)
    el = embed.embedded_local_energy(tr, ham, phi, core_det, part)
    full = trial_mod.MultiDet(amplitudes=trial_mod.AmplitudeMap(part.n_orb, na + nc, nb + nc, vf))
    ref = trial_mod.local_energy_exact(full, ham, phi)
    return {"identity_max_error": worst_id, "local_energy_error": abs(el - ref), "n_instances": cfg.embed_instances,
            "n_samples": cfg.embed_instances, "energy": None, "std_error": None}


def task_blocking(cfg: RunConfig, out: Path, args) -> dict:
    series = afqmc.EnergyTimeSeries.from_csv(cfg.path(cfg.series).read_text())
    res = afqmc.blocking_analysis(series, cfg.equilibration)
    return {"energy": res.mean, "std_error": res.std_error, "optimal_block": res.optimal_block,
            "block_report": [list(r) for r in res.block_report],
            "n_samples": int(np.sum(np.array(series.tau) >= cfg.equilibration))}


HANDLERS = {"fci": task_fci, "afqmc": task_afqmc, "shadows-acquire": task_shadows_acquire,
            "shadows-estimate": task_shadows_estimate, "qcafqmc": task_qcafqmc, "embed-check": task_embed_check,
            "blocking": task_blocking}


def run_task(cfg: RunConfig, resume: str | None = None, atomize: tuple[int, float] | None = None) -> dict:
    """Run one task; writes artifacts plus summary.json into the output directory."""
    out = cfg.path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    args = argparse.Namespace(resume=resume)
    doc = HANDLERS[cfg.task](cfg, out, args)
    if atomize is not None and doc.get("energy") is not None:
        n, e_atom = atomize
        doc["atomization_kcal_mol"] = atomization_energy(doc["energy"], n, e_atom)
        if doc.get("std_error") is not None:
            doc["atomization_std_error"] = doc["std_error"] * HARTREE_TO_KCAL
    doc = _stamp(cfg, doc)
    _write_json(out / "summary.json", doc)
    return doc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcafqmc", description="Quantum-classical hybrid AFQMC simulation engine")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, help="worker threads")
        sp.add_argument("--resume", help="AFQMC checkpoint to resume from")
        sp.add_argument("--output-dir", help="override the output directory")
        sp.add_argument("--atomize", type=int, metavar="N_ATOMS", help="report n*E_atom - E in kcal/mol")
        sp.add_argument("--atom-energy", type=float, default=None, help="atomic reference energy (Hartree)")

    for name in ("fci", "afqmc", "qcafqmc", "embed-check", "blocking"):
        common(sub.add_parser(name))
    sh = sub.add_parser("shadows")
    shsub = sh.add_subparsers(dest="action", required=True)
    for name in ("acquire", "estimate"):
        common(shsub.add_parser(name))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    task = f"shadows-{args.action}" if args.command == "shadows" else args.command
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(task=task, seed=args.seed, threads=args.threads, output_dir=args.output_dir)
        atomize = None
        if args.atomize is not None:
            from .config import H_ATOM_STO3G
            atomize = (args.atomize, args.atom_energy if args.atom_energy is not None else H_ATOM_STO3G)
        doc = run_task(cfg, resume=args.resume, atomize=atomize)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"qcafqmc {task}: error: {exc}", file=sys.stderr)
        return 2
    shown = {k: doc[k] for k in ("task", "energy", "std_error", "atomization_kcal_mol", "config_hash") if k in doc}
    print(json.dumps(shown, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
