import numpy as np
import pytest

from conftest import DATA
from qcafqmc import shadows as S
from qcafqmc import stab
from qcafqmc import trial as T
from qcafqmc.qsim import NoiseModel


def _random_psi(n, rng, parts=None):
    psi = rng.normal(size=2**n) + 1j * rng.normal(size=2**n)
    psi[0] = 0
    if parts == (2, 2):
        # zero any amplitude whose part-wise restriction is the vacuum of a part
        psi[[i for i in range(16) if (i >> 2) == 0 or (i & 3) == 0]] = 0
    return psi / np.linalg.norm(psi)


@pytest.mark.parametrize("parts", [(2,), (3,), (4,), (2, 2)])
def test_exact_expectation_recovers_amplitudes(parts, rng):
    n = sum(parts)
    psi = _random_psi(n, rng, parts)
    tau = S.tau_from_amplitudes(psi)
    ens = S.Ensemble(parts)
    betas = [b for b in range(1, 2**n) if all(x != 0 for x in S._split(np.array([b]), ens))]
    est = S.exact_expectation(tau.amplitudes, ens, betas)
    np.testing.assert_allclose(est, psi[betas], atol=1e-12)
    noisy = S.exact_expectation(tau.amplitudes, ens, betas, noise_p=0.3)
    np.testing.assert_allclose(noisy, 0.7 * psi[betas], atol=1e-12)


def test_two_qubit_estimator_over_full_clifford_group(rng):
    # independent route: every Clifford tableau, amplitudes from the stabilizer simulator
    n = 2
    psi = _random_psi(n, rng)
    tau = S.tau_from_amplitudes(psi).amplitudes
    pref = 2.0 * (2**n + 1)
    b = np.arange(4)[:, None]
    x = np.arange(4)[None, :]
    acc = np.zeros(3, dtype=complex)
    total = 0.0
    for prob, u in stab.enumerate_cliffords(n):
        a = stab.clifford_amplitudes(u, b, x)
        p = np.abs(a @ tau) ** 2
        acc += prob * (p[:, None] * pref * np.conj(a[:, 1:]) * a[:, [0]]).sum(axis=0)
        total += prob
    assert abs(total - 1) < 1e-12
    np.testing.assert_allclose(acc, psi[1:], atol=1e-12)


@pytest.fixture(scope="module")
def h4_tau():
    from qcafqmc.hamio import read_fcidump
    ham = read_fcidump(DATA / "h4_sto3g.fcidump")
    tmpl = T.CircuitTrialSpec(4, 2, (0.1, 0.1), T.default_layers(4, 2), rotation_angles=(0.0,) * 6)
    spec = T.optimize_pp(ham, tmpl, restarts=1, jitter=0.1, seed=0).spec
    return ham, spec, T.prepare_tau(spec)


def test_acquisition_determinism_and_prefix(h4_tau):
    _, _, tau = h4_tau
    a = S.acquire_shadow(tau, 8, 40, 100, seed=5)
    b = S.acquire_shadow(tau, 8, 40, 100, seed=5, n_threads=3)
    c = S.acquire_shadow(tau, 8, 15, 100, seed=5)
    assert a.gforms == b.gforms and np.array_equal(a.outcomes, b.outcomes)
    assert a.subset(15).gforms == c.gforms and np.array_equal(a.outcomes[:15], c.outcomes)
    d = S.acquire_shadow(tau, 8, 40, 100, seed=6)
    assert not np.array_equal(a.outcomes, d.outcomes)


def test_archive_roundtrip(tmp_path, h4_tau):
    _, _, tau = h4_tau
    rec = S.acquire_shadow(tau, S.Ensemble((4, 4)), 20, 50, NoiseModel(0.1), seed=2)
    S.write_shadow(rec, tmp_path / "r.shdw")
    back = S.read_shadow(tmp_path / "r.shdw")
    assert back.gforms == rec.gforms and np.array_equal(back.outcomes, rec.outcomes)
    assert back.noise == rec.noise and back.seed == rec.seed and back.ensemble == rec.ensemble
    (tmp_path / "bad.shdw").write_bytes(b"junk")
    with pytest.raises(ValueError):
        S.read_shadow(tmp_path / "bad.shdw")


def test_reconstruction_is_statistically_consistent(h4_tau):
    ham, spec, tau = h4_tau
    rec = S.acquire_shadow(tau, 8, 400, 1000, seed=11)
    tr = S.reconstruct_trial(rec, 4, 2, 2, offline_rotation=spec.rotation(), qubit_map=spec.qubit_map)
    true = T.build_pp_state(spec).vector
    z = np.abs(tr.amplitudes.vector - true) / tr.std_errors
    # complex deviation over a complex error: loose bound, most should be O(1)
    assert np.median(z) < 2.0
    assert z.max() < 6.0
    one = S.estimate_basis_overlap(rec, int(T._gather_signs(spec, tr.basis)[0][0]))
    assert one.n_samples == 400 and one.std_error > 0


def test_ratio_and_walker_overlap(h4_tau, rng):
    _, spec, tau = h4_tau
    rec = S.acquire_shadow(tau, 8, 200, 1000, seed=3)
    idx, sign = T._gather_signs(spec, T.build_pp_state(spec).basis)
    order = np.argsort(-np.abs(tau.amplitudes[idx]))
    b0, b1 = int(idx[order[0]]), int(idx[order[1]])
    r = S.estimate_overlap_ratio(rec, b1, b0)
    true = tau.amplitudes[b1] / tau.amplitudes[b0]
    assert abs(r.value - true) < 5 * r.std_error
    tr = S.reconstruct_trial(rec, 4, 2, 2, qubit_map=spec.qubit_map)
    from qcafqmc.slater import SlaterDeterminant
    d = SlaterDeterminant.random(4, 2, 2, rng)
    assert abs(S.estimate_walker_overlap(tr, d) - np.conj(T.trial_overlap(tr, d))) < 1e-14


def test_sampling_overlap(rng):
    psi = rng.normal(size=16) + 1j * rng.normal(size=16)
    phi = rng.normal(size=16) + 0.5
    phi /= np.linalg.norm(phi)
    est = S.sampling_overlap(psi, phi, 20000, rng)
    assert abs(est.value - np.vdot(phi, psi)) < 5 * est.std_error


def test_estimates_csv(tmp_path, h4_tau):
    _, spec, tau = h4_tau
    rec = S.acquire_shadow(tau, 8, 10, 10, seed=1)
    tr = S.reconstruct_trial(rec, 4, 2, 2, qubit_map=spec.qubit_map)
    S.write_estimates_csv(tr, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "beta_up,beta_dn,re,im,stderr" and len(lines) == 37


def test_ensemble_validation(h4_tau):
    _, _, tau = h4_tau
    with pytest.raises(ValueError):
        S.acquire_shadow(tau, 6, 5)
    with pytest.raises(ValueError):
        S.Ensemble((0, 4))
