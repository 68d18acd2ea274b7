import numpy as np
import pytest
import scipy.linalg

from conftest import DATA
from qcafqmc import afqmc as A
from qcafqmc import trial as T
from qcafqmc.hamio import cholesky_factorize
from qcafqmc.oracle import SectorHamiltonian, fci_solve
from qcafqmc.slater import SlaterDeterminant, Walker, read_slater, string_minors


@pytest.fixture(scope="module")
def uhf_setup(h4):
    chol = cholesky_factorize(h4)
    tr = T.SingleDet(det=read_slater(DATA / "h4_sto3g_uhf.slater"))
    return h4, chol, tr


def _vec(u, d, b):
    return np.outer(string_minors(u, b.strings_alpha), string_minors(d, b.strings_beta)).reshape(-1)


def test_shifted_decomposition_reproduces_h(uhf_setup):
    ham, chol, tr = uhf_setup
    b = tr.basis
    prop = A.build_propagator(ham, chol, tr, 0.01)
    h = SectorHamiltonian(ham, b).dense
    ls = [b.onebody_matrix(l, l) for l in chol.vectors]
    k = b.onebody_matrix(prop.h1_prime, prop.h1_prime)
    eye = np.eye(b.dim)
    h2 = prop.e0_prime * eye + k + 0.5 * sum((lg - m * eye) @ (lg - m * eye) for lg, m in zip(ls, prop.mf_shifts.real))
    np.testing.assert_allclose(h2, h, atol=1e-11)


def test_single_step_matches_dense_propagator(uhf_setup, rng):
    ham, chol, tr = uhf_setup
    b = tr.basis
    prop = A.build_propagator(ham, chol, tr, 0.01)
    ls = [b.onebody_matrix(l, l) for l in chol.vectors]
    k = b.onebody_matrix(prop.h1_prime, prop.h1_prime)
    d = SlaterDeterminant.random(4, 2, 2, rng)
    x = rng.normal(size=(1, len(ls)))
    ev = T.make_evaluator(tr, ham, chol)
    u, dn, w, ov = A._propagate_batch(d.up[None], d.dn[None], np.ones(1), np.array([T.trial_overlap(tr, d)]), x,
                                      prop, ev, 0.0, 0.0)
    _, _, fb = ev.evaluate(d.up[None], d.dn[None])
    xs = (x + 1j * np.sqrt(prop.dt) * (fb - prop.mf_shifts))[0]
    bmat = (scipy.linalg.expm(-0.5 * prop.dt * k)
            @ scipy.linalg.expm(1j * np.sqrt(prop.dt) * sum(xg * lg for xg, lg in zip(xs, ls)))
            @ scipy.linalg.expm(-0.5 * prop.dt * k))
    np.testing.assert_allclose(_vec(u[0], dn[0], b), bmat @ _vec(d.up, d.dn, b), atol=1e-10)
    assert w[0] >= 0


def test_propagate_step_interface(uhf_setup, rng):
    ham, chol, tr = uhf_setup
    prop = A.build_propagator(ham, chol, tr, 0.005)
    d = tr.rotated_det
    wk = Walker(d, 1.0, T.trial_overlap(tr, d))
    new = A.propagate_step(wk, prop, tr, rng, ham=ham, chol=chol)
    assert new.weight >= 0
    with pytest.raises(ValueError):
        A.propagate_step(Walker(d, 0.0, 1.0), prop, tr, rng, ham=ham, chol=chol)


def test_hybrid_weight():
    assert A.hybrid_weight_factor(2.0, 1.5) == 1.5
    assert A.hybrid_weight_factor(-1.0 + 0.1j) == 0.0
    assert abs(A.hybrid_weight_factor(np.exp(0.5j)) - np.cos(0.5)) < 1e-15


def test_population_control(rng):
    w = rng.exponential(size=50)
    w[[3, 7]] = 0
    idx, nw = A.population_control(w, 40, rng)
    assert idx.size == 40 and abs(nw.sum() - w.sum()) < 1e-12
    assert not np.isin(idx, [3, 7]).any()
    # expected number of copies is proportional to (capped) weight
    counts = np.zeros(50)
    for _ in range(2000):
        i, _ = A.population_control(w, 40, rng)
        counts += np.bincount(i, minlength=50)
    cap = 4 * w.sum() / 48
    wc = np.minimum(w, cap)
    np.testing.assert_allclose(counts / 2000, 40 * wc / wc.sum(), atol=0.08)
    with pytest.raises(ValueError):
        A.population_control(np.zeros(4), 4, rng)


def test_blocking_on_correlated_series():
    rng = np.random.default_rng(5)
    n, phi = 2**14, 0.9
    x = np.empty(n)
    x[0] = 0
    for i in range(1, n):
        x[i] = phi * x[i - 1] + rng.normal()
    res = A.blocking_analysis(x)
    true_se = np.sqrt(1 / (1 - phi**2) * (1 + phi) / (1 - phi) / n)
    assert res.optimal_block > 1
    assert 0.7 * true_se < res.std_error < 1.3 * true_se
    with pytest.raises(ValueError):
        A.blocking_analysis(np.ones(10))


def test_series_csv_roundtrip():
    s = A.EnergyTimeSeries()
    s.append(0.01, -1.5, 1.0, 10)
    s.append(0.02, -3.0, 2.0, 10)
    back = A.EnergyTimeSeries.from_csv(s.to_csv())
    assert back.tau == s.tau and back.e_num == s.e_num and back.weight == s.weight
    with pytest.raises(ValueError):
        s.append(0.02, 1.0, 1.0, 1)


def _small_params(**kw):
    base = dict(dt=0.01, n_walkers=24, t_equil=0.2, n_measure_steps=60, n_meas=2, ortho_every=5, pop_every=10, seed=4)
    base.update(kw)
    return A.AFQMCParams(**base)


@pytest.mark.parametrize("kind", ["single", "multi"])
def test_thread_count_does_not_change_results(uhf_setup, kind):
    ham, chol, tr = uhf_setup
    if kind == "multi":
        tr = T.exact_trial(ham)
    p = _small_params(n_walkers=150, n_measure_steps=40)
    a = A.run(ham, tr, p, chol=chol, n_threads=1)
    b = A.run(ham, tr, p, chol=chol, n_threads=4)
    assert a.series.to_csv() == b.series.to_csv()
    np.testing.assert_array_equal(a.batch.ups, b.batch.ups)


def test_checkpoint_resume_is_seamless(uhf_setup, tmp_path):
    ham, chol, tr = uhf_setup
    p = _small_params()
    full = A.run(ham, tr, p, chol=chol)
    part = A.run(ham, tr, p, chol=chol, stop_after=37)
    A.write_checkpoint(part, tmp_path / "c.bin")
    back = A.read_checkpoint(tmp_path / "c.bin")
    done = A.run(ham, tr, p, chol=chol, resume=back)
    assert done.series.to_csv() == full.series.to_csv()
    np.testing.assert_array_equal(done.batch.weights, full.batch.weights)


def test_exact_trial_has_no_variance(h4):
    e, _ = fci_solve(h4)
    p = _small_params(n_measure_steps=100)
    st = A.run(h4, T.exact_trial(h4), p)
    assert np.allclose(st.series.energies(), e, atol=1e-10)


def test_h2_rhf_near_exact(h2):
    e, _ = fci_solve(h2)
    tr = T.SingleDet(det=SlaterDeterminant.from_occupations(h2.n_orb, [0], [0]))
    p = A.AFQMCParams(dt=0.01, n_walkers=200, t_equil=0.5, n_measure_steps=700, seed=2)
    st = A.run(h2, tr, p)
    s = A.summarize(st, p)
    # two electrons in a singlet: the phaseless constraint is exact up to time-step error
    assert abs(s["mean"] - e) < max(4 * s["std_error"], 1e-3)


def test_summary_fields(uhf_setup):
    ham, chol, tr = uhf_setup
    p = _small_params(n_measure_steps=100)
    st = A.run(ham, tr, p, chol=chol)
    s = A.summarize(st, p)
    for key in ("mean", "std_error", "optimal_block", "config_hash", "seed"):
        assert key in s
