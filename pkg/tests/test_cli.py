import json
import shutil

import pytest
import yaml

from conftest import DATA
from qcafqmc.cli import main, run_task
from qcafqmc.config import ConfigError, atomization_energy, config_from_dict, load_config


@pytest.fixture
def work(tmp_path):
    for f in ("h4_sto3g.fcidump", "h4_sto3g_uhf.slater"):
        shutil.copy(DATA / f, tmp_path / f)
    return tmp_path


def _write(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


def test_defaults(work):
    cfg = load_config(_write(work / "c.yaml", {"task": "fci", "seed": 1, "fcidump": "h4_sto3g.fcidump"}))
    assert (cfg.dt, cfg.walkers, cfg.shots) == (0.005, 1024, 1000)


@pytest.mark.parametrize("doc,msg", [
    ({"task": "afqmc", "seed": 1, "fcidump": "h4_sto3g.fcidump", "wakers": 3}, "did you mean 'walkers'"),
    ({"task": "afqmc", "fcidump": "h4_sto3g.fcidump"}, "'seed' is required"),
    ({"task": "afqmc", "seed": 1, "fcidump": "missing.fcidump"}, "does not exist"),
    ({"task": "afqmc", "seed": 1, "fcidump": "h4_sto3g.fcidump", "dt": "fast"}, "expected a number"),
    ({"task": "afqmc", "seed": 1.5, "fcidump": "h4_sto3g.fcidump"}, "expected an integer"),
    ({"task": "dance", "seed": 1, "fcidump": "h4_sto3g.fcidump"}, "unknown task"),
    ({"task": "afqmc", "seed": 1, "fcidump": "h4_sto3g.fcidump", "depolarizing_p": 2.0}, "[0, 1]"),
])
def test_config_errors(work, doc, msg):
    with pytest.raises(ConfigError, match=msg.replace("[", r"\[").replace("]", r"\]")):
        load_config(_write(work / "c.yaml", doc))


def test_malformed_yaml(work):
    (work / "c.yaml").write_text("task: [afqmc\n")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(work / "c.yaml")


def test_main_reports_config_error(work, capsys):
    path = _write(work / "c.yaml", {"task": "afqmc", "seed": 1, "fcidump": "h4_sto3g.fcidump", "wakers": 2})
    assert main(["afqmc", "--config", str(path)]) == 2
    assert "did you mean" in capsys.readouterr().err


def test_fci_task(work, capsys):
    path = _write(work / "c.yaml", {"task": "fci", "seed": 1, "fcidump": "h4_sto3g.fcidump", "output_dir": "o"})
    assert main(["fci", "--config", str(path)]) == 0
    doc = json.loads((work / "o" / "summary.json").read_text())
    assert abs(doc["energy"] + 1.969512) < 1e-6
    for key in ("std_error", "n_samples", "config_hash", "seed", "formats"):
        assert key in doc
    assert (work / "o" / "fci_vector.txt").exists()


def test_afqmc_task_with_atomization(work):
    cfg = config_from_dict({"task": "afqmc", "seed": 3, "fcidump": "h4_sto3g.fcidump", "trial": "slater",
                            "trial_file": "h4_sto3g_uhf.slater", "walkers": 16, "n_steps": 80,
                            "equilibration": 0.05, "output_dir": "o", "checkpoint": "o/ck.bin"}, str(work))
    doc = run_task(cfg, atomize=(4, -0.46658185))
    assert doc["atomization_kcal_mol"] == pytest.approx(atomization_energy(doc["energy"], 4))
    assert (work / "o" / "energy.csv").read_text().startswith("tau,e_num,weight,nwalkers")
    assert (work / "o" / "ck.bin").exists()


def test_shadow_pipeline_tasks(work):
    base = {"seed": 2, "fcidump": "h4_sto3g.fcidump", "n_cliffords": 20, "shots": 50, "circuit_layers": 1,
            "optimize_restarts": 1, "walkers": 8, "n_steps": 70, "equilibration": 0.01}
    run_task(config_from_dict(dict(base, task="shadows-acquire", output_dir="a"), str(work)))
    assert (work / "a" / "record.shdw").exists() and (work / "a" / "trial.json").exists()
    est = run_task(config_from_dict(dict(base, task="shadows-estimate", output_dir="b",
                                         shadow_record="a/record.shdw"), str(work)))
    assert est["variational_energy"] is not None
    q = run_task(config_from_dict(dict(base, task="qcafqmc", output_dir="c", shadow_mode="exact"), str(work)))
    assert q["energy"] is not None
    blk = run_task(config_from_dict({"task": "blocking", "seed": 0, "series": "c/energy.csv",
                                     "equilibration": 0.01, "output_dir": "d"}, str(work)))
    assert blk["energy"] == pytest.approx(q["energy"])


def test_embed_check_task(work):
    doc = run_task(config_from_dict({"task": "embed-check", "seed": 1, "embed_instances": 10, "output_dir": "e"},
                                    str(work)))
    assert doc["identity_max_error"] < 1e-10 and doc["local_energy_error"] < 1e-8
