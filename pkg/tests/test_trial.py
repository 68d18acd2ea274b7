import numpy as np
import pytest

from conftest import DATA
from qcafqmc import trial as T
from qcafqmc.hamio import cholesky_factorize
from qcafqmc.oracle import SectorBasis, SectorHamiltonian, fci_solve
from qcafqmc.slater import SlaterDeterminant, read_slater


@pytest.fixture(scope="module")
def spec():
    rng = np.random.default_rng(1)
    s = T.CircuitTrialSpec(4, 2, (0.3, -0.2), T.default_layers(4), rotation_angles=(0.1,) * 6)
    return s.with_parameters(rng.normal(size=s.parameters().size) * 0.3)


def test_tau_encodes_pp_state(spec):
    tau = T.prepare_tau(spec)
    pp = T.build_pp_state(spec)
    idx, sign = T._gather_signs(spec, SectorBasis(4, 2, 2))
    np.testing.assert_allclose(np.sqrt(2) * tau.amplitudes[idx] * sign, pp.vector, atol=1e-14)
    assert abs(tau.amplitudes[0] - 1 / np.sqrt(2)) < 1e-14
    # nothing outside the vacuum and the sector
    rest = np.delete(tau.amplitudes, np.concatenate([[0], idx]))
    assert np.abs(rest).max() < 1e-14


def test_circuit_state_matches_statevector(spec):
    sv = T.circuit_statevector(spec).amplitudes
    pp = T.build_pp_state(spec)
    idx, sign = T._gather_signs(spec, pp.basis)
    np.testing.assert_allclose(sv[idx] * sign, pp.vector, atol=1e-14)
    assert abs(np.linalg.norm(sv[idx]) - 1) < 1e-12


def test_sector_ansatz_and_gradient(h4, spec):
    ans = T._SectorAnsatz(spec)
    x = spec.parameters()
    b = SectorBasis(4, 2, 2)
    vr = b.rotate_vector(spec.rotation(), spec.rotation(), T.build_pp_state(spec).vector)
    np.testing.assert_allclose(ans.state(x), vr, atol=1e-13)
    op = SectorHamiltonian(h4, b)
    e, g = ans.energy_and_gradient(x, op.matvec)
    assert abs(e - T.ansatz_energy(h4, spec)) < 1e-12
    h = 1e-6
    fd = np.array([(ans.energy_and_gradient(x + h * d, op.matvec)[0] - ans.energy_and_gradient(x - h * d, op.matvec)[0])
                   / (2 * h) for d in np.eye(len(x))])
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_overlap_and_local_energy(h4, spec, rng):
    tr = T.circuit_trial(spec)
    chol = cholesky_factorize(h4)
    uhf = T.SingleDet(det=read_slater(DATA / "h4_sto3g_uhf.slater"))
    md = T.MultiDet(amplitudes=T.AmplitudeMap(4, 2, 2, rng.normal(size=36) + 1j * rng.normal(size=36)),
                    offline_rotation=spec.rotation())
    for _ in range(3):
        d = SlaterDeterminant.random(4, 2, 2, rng)
        assert abs(T.trial_overlap(tr, d) - T.circuit_overlap_statevector(tr, d)) < 1e-12
        for t in (tr, uhf, md):
            ref = T.local_energy_exact(t, h4, d)
            assert abs(T.local_energy(t, h4, d) - ref) < 1e-10 * max(1, abs(ref))
            ov, el, fb = T.SectorEvaluator(t, h4, chol).evaluate(d.up[None], d.dn[None])
            assert abs(ov[0] - T.trial_overlap(t, d)) < 1e-12 * max(1, abs(ov[0]))
            assert abs(el[0] - ref) < 1e-10 * max(1, abs(ref))
            np.testing.assert_allclose(fb[0], T.force_bias(t, chol, d), atol=1e-10)


def test_force_bias_is_mixed_expectation(h4, rng):
    # fb_g = <T|L_g|phi> / <T|phi>
    chol = cholesky_factorize(h4)
    md = T.MultiDet(amplitudes=T.AmplitudeMap(4, 2, 2, rng.normal(size=36)))
    d = SlaterDeterminant.random(4, 2, 2, rng)
    b = md.basis
    from qcafqmc.slater import string_minors
    v = np.outer(string_minors(d.up, b.strings_alpha), string_minors(d.dn, b.strings_beta)).reshape(-1)
    ov = np.vdot(md.sector_vector, v)
    fb = T.force_bias(md, chol, d)
    for g, l in enumerate(chol.vectors):
        assert abs(fb[g] - np.vdot(md.sector_vector, b.apply_onebody(l, l, v)) / ov) < 1e-10


def test_greens_evaluator_matches_sector(h4, rng):
    chol = cholesky_factorize(h4)
    sd = T.SingleDet(det=read_slater(DATA / "h4_sto3g_uhf.slater"))
    ds = [SlaterDeterminant.random(4, 2, 2, rng) for _ in range(5)]
    ups = np.array([d.up for d in ds])
    dns = np.array([d.dn for d in ds])
    a = T.GreensEvaluator(sd, h4, chol).evaluate(ups, dns)
    b = T.SectorEvaluator(sd, h4, chol).evaluate(ups, dns)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-11)
    assert isinstance(T.make_evaluator(sd, h4), T.GreensEvaluator)


def test_optimizer_reaches_fci(h4):
    e_fci, _ = fci_solve(h4)
    tmpl = T.CircuitTrialSpec(4, 2, (0.1, 0.1), T.default_layers(4, 3), rotation_angles=(0.0,) * 6)
    res = T.optimize_pp(h4, tmpl, restarts=2, jitter=0.1, seed=0)
    assert res.converged
    assert res.energy - e_fci < 1e-4
    assert abs(T.ansatz_energy(h4, res.spec) - res.energy) < 1e-12


def test_exact_trial_energy(h4):
    from qcafqmc.shadows import variational_energy
    e, _ = fci_solve(h4)
    assert abs(variational_energy(T.exact_trial(h4), h4) - e) < 1e-12


def test_spec_json_and_amplitude_files(tmp_path, spec, rng):
    T.write_circuit_spec(spec, tmp_path / "c.json")
    back = T.read_circuit_spec(tmp_path / "c.json")
    assert back == spec
    amps = T.AmplitudeMap(4, 2, 2, rng.normal(size=36) + 1j * rng.normal(size=36))
    T.write_amplitudes(amps, tmp_path / "a.txt")
    np.testing.assert_array_equal(T.read_amplitudes(tmp_path / "a.txt", 4).vector, amps.vector)


def test_spec_validation():
    with pytest.raises(ValueError):
        T.CircuitTrialSpec(4, 2, (0.1,))
    with pytest.raises(ValueError):
        T.CircuitTrialSpec(4, 2, (0.1, 0.2), (T.Layer("hopping", ((0, 5),), (0.1,)),))
    with pytest.raises(ValueError):
        T.MultiDet(amplitudes=T.AmplitudeMap(4, 2, 2, np.ones(36)), offline_rotation=np.ones((4, 4)))


def test_sector_mismatch(h4, rng):
    tr = T.MultiDet(amplitudes=T.AmplitudeMap(4, 2, 2, np.ones(36)))
    with pytest.raises(ValueError):
        T.trial_overlap(tr, SlaterDeterminant.random(4, 3, 1, rng))


def test_local_energy_gauge_invariance(h4, spec, rng):
    tr = T.circuit_trial(spec)
    d = SlaterDeterminant.random(4, 2, 2, rng)
    m = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    dg = SlaterDeterminant(d.up @ m, d.dn @ m.T)
    assert abs(T.local_energy(tr, h4, d) - T.local_energy(tr, h4, dg)) < 1e-10
