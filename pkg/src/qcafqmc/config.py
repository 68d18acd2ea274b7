"""Flat YAML run configuration."""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

TASKS = ("fci", "afqmc", "shadows-acquire", "shadows-estimate", "qcafqmc", "embed-check", "blocking")
TRIAL_KINDS = ("rhf", "fci", "slater", "amplitudes", "circuit", "shadow")
H_ATOM_STO3G = -0.46658185
H_ATOM_CCPVQZ = -0.499945569
HARTREE_TO_KCAL = 627.509474


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    task: str
    seed: int
    fcidump: str | None = None
    output_dir: str = "out"
    threads: int = 1
    # trial
    trial: str | None = None
    trial_file: str | None = None
    circuit_layers: int = 3
    optimize_restarts: int = 4
    optimize_jitter: float = 0.1
    # afqmc
    dt: float = 0.005
    walkers: int = 1024
    n_steps: int = 10000
    equilibration: float = 2.0
    measure_every: int = 2
    ortho_every: int = 10
    pop_every: int = 20
    cholesky_tol: float = 1e-8
    force_bias_cap: float = 1.0
    checkpoint: str | None = None
    checkpoint_every: int = 0
    # shadows
    n_cliffords: int = 1000
    shots: int = 1000
    depolarizing_p: float = 0.0
    ensemble: str = "global"
    shadow_record: str | None = None
    shadow_mode: str = "sampled"
    median_of_means: int = 0
    # embedding
    active: tuple[int, ...] | None = None
    core: tuple[int, ...] = ()
    virtual: tuple[int, ...] = ()
    embed_instances: int = 100
    # blocking
    series: str | None = None
    base_dir: str = field(default=".", compare=False)

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_overrides(self, **kw) -> "RunConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update({k: v for k, v in kw.items() if v is not None})
        return _validate(data)


_INPUT_PATHS = ("fcidump", "trial_file", "shadow_record", "series")


def _coerce(name: str, value: Any, typ: str):
    if value is None:
        return None
    if "tuple" in typ:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"key '{name}': expected a list of integers, got {value!r}")
        return tuple(value)
    if typ.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{name}': expected an integer, got {value!r}")
        return value
    if typ.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{name}': expected a number, got {value!r}")
        return float(value)
    if typ.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"key '{name}': expected a string, got {value!r}")
        return value
    return value


def _validate(data: dict) -> RunConfig:
    types = {f.name: str(f.type) for f in fields(RunConfig)}
    known = set(types)
    for key in data:
        if key not in known:
            hint = difflib.get_close_matches(key, sorted(known), n=1)
            msg = f"unknown key '{key}'"
            if hint:
                msg += f"; did you mean '{hint[0]}'?"
            raise ConfigError(msg)
    for req in ("task", "seed"):
        if data.get(req) is None:
            raise ConfigError(f"key '{req}' is required")
    clean = {k: _coerce(k, v, types[k]) for k, v in data.items()}
    cfg = RunConfig(**clean)
    if cfg.task not in TASKS:
        raise ConfigError(f"key 'task': unknown task {cfg.task!r} (choose from {', '.join(TASKS)})")
    if cfg.trial is not None and cfg.trial not in TRIAL_KINDS:
        raise ConfigError(f"key 'trial': unknown kind {cfg.trial!r} (choose from {', '.join(TRIAL_KINDS)})")
    if cfg.ensemble not in ("global", "partitioned"):
        raise ConfigError("key 'ensemble': expected 'global' or 'partitioned'")
    if cfg.shadow_mode not in ("sampled", "exact"):
        raise ConfigError("key 'shadow_mode': expected 'sampled' or 'exact'")
    if not 0.0 <= cfg.depolarizing_p <= 1.0:
        raise ConfigError("key 'depolarizing_p': must lie in [0, 1]")
    for name in ("threads", "walkers", "measure_every", "ortho_every", "pop_every", "n_cliffords", "shots"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"key '{name}': must be positive")
    if cfg.dt <= 0:
        raise ConfigError("key 'dt': must be positive")
    for name in _INPUT_PATHS:
        p = cfg.path(getattr(cfg, name))
        if p is not None and not p.exists():
            raise ConfigError(f"key '{name}': file {p} does not exist")
    if cfg.task != "blocking" and cfg.fcidump is None and cfg.task != "embed-check":
        raise ConfigError("key 'fcidump' is required for this task")
    if cfg.task == "blocking" and cfg.series is None:
        raise ConfigError("key 'series' is required for the blocking task")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML ({exc})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of keys to values")
    data = dict(data)
    data.setdefault("base_dir", str(path.parent))
    return _validate(data)


def config_from_dict(data: dict, base_dir: str = ".") -> RunConfig:
    data = dict(data)
    data.setdefault("base_dir", base_dir)
    return _validate(data)


def atomization_energy(e_molecule: float, n_atoms: int, e_atom: float = H_ATOM_STO3G) -> float:
    """n E_atom - E_molecule in kcal/mol."""
    return (n_atoms * e_atom - e_molecule) * HARTREE_TO_KCAL
