import numpy as np
import pytest
import scipy.linalg

from qcafqmc.oracle import SectorBasis
from qcafqmc.slater import (OrthogonalWalkerError, SlaterDeterminant, det_amplitude, expm, greens_function,
                            orthonormalize, overlap, read_slater, string_minors, write_slater)


def _vec(det, basis):
    return np.outer(string_minors(det.up, basis.strings_alpha), string_minors(det.dn, basis.strings_beta)).reshape(-1)


def test_overlap_matches_configuration_sum(rng):
    a = SlaterDeterminant.random(5, 3, 2, rng)
    b = SlaterDeterminant.random(5, 3, 2, rng)
    basis = SectorBasis(5, 3, 2)
    ref = np.vdot(_vec(a, basis), _vec(b, basis))
    assert abs(overlap(a, b) - ref) < 1e-12 * abs(ref)


def test_greens_function_elements(rng):
    t = SlaterDeterminant.random(4, 2, 2, rng)
    w = SlaterDeterminant.random(4, 2, 2, rng)
    gu, _ = greens_function(t, w)
    basis = SectorBasis(4, 2, 2)
    vt, vw = _vec(t, basis), _vec(w, basis)
    ov = np.vdot(vt, vw)
    for p, q in [(0, 1), (2, 2), (3, 0)]:
        m = np.zeros((4, 4)); m[p, q] = 1.0
        ex = basis.apply_onebody(m, np.zeros((4, 4)), vw)  # a+_p a_q, up spin
        assert abs(gu[q, p] - np.vdot(vt, ex) / ov) < 1e-10


def test_orthogonal_walker_raises():
    t = SlaterDeterminant.from_occupations(4, [0, 1], [0, 1])
    w = SlaterDeterminant.from_occupations(4, [2, 3], [0, 1])
    with pytest.raises(OrthogonalWalkerError):
        greens_function(t, w)


def test_orthonormalize_preserves_overlap_ratio(rng):
    bra = SlaterDeterminant.random(6, 3, 3, rng)
    d = SlaterDeterminant(rng.normal(size=(6, 3)) * 3, rng.normal(size=(6, 3)) + 1j)
    new, logf = orthonormalize(d)
    for blk in new.blocks:
        np.testing.assert_allclose(blk.conj().T @ blk, np.eye(3), atol=1e-12)
    assert abs(overlap(bra, d) - np.exp(logf) * overlap(bra, new)) < 1e-10 * abs(overlap(bra, d))


def test_expm_paths(rng):
    h = rng.normal(size=(4, 4)); h = h + h.T
    a = rng.normal(size=(4, 4)); a = a - a.T
    g = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    for m in (h, a, 1j * h, g):
        np.testing.assert_allclose(expm(m), scipy.linalg.expm(m), atol=1e-11)


def test_det_amplitude(rng):
    d = SlaterDeterminant.random(4, 2, 1, rng)
    basis = SectorBasis(4, 2, 1)
    v = _vec(d, basis)
    i = basis.index([1, 3], [2])
    assert abs(det_amplitude(d, ((0, 1, 0, 1), (0, 0, 1, 0))) - v[i]) < 1e-14


def test_slater_file_roundtrip(tmp_path, rng):
    d = SlaterDeterminant.random(5, 3, 2, rng)
    write_slater(d, tmp_path / "d.slater")
    back = read_slater(tmp_path / "d.slater")
    np.testing.assert_array_equal(back.up, d.up)
    np.testing.assert_array_equal(back.dn, d.dn)


def test_shape_validation():
    with pytest.raises(ValueError):
        SlaterDeterminant(np.zeros((4, 2)), np.zeros((3, 2)))


def test_gauge_invariance_of_ratios(rng):
    a = SlaterDeterminant.random(5, 2, 3, rng)
    b = SlaterDeterminant.random(5, 2, 3, rng)
    w = SlaterDeterminant.random(5, 2, 3, rng)
    m = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    n = rng.normal(size=(3, 3))
    wg = SlaterDeterminant(w.up @ m, w.dn @ n)
    scale = np.linalg.det(m) * np.linalg.det(n)
    assert abs(overlap(a, wg) - scale * overlap(a, w)) < 1e-10 * abs(overlap(a, wg))
    r1 = overlap(a, w) / overlap(b, w)
    r2 = overlap(a, wg) / overlap(b, wg)
    assert abs(r1 - r2) < 1e-10 * abs(r1)
