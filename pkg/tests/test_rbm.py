
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from graphrbm.decompose import preset
from graphrbm.fem import Mesh1D, assemble, assemble_interval
from graphrbm.graph import build_paper_graph
from graphrbm.rbm import (DecompositionError, batch_force, batch_matrix, bound_control,
                          bound_trajectory, c_of_m, make_decomposition, min_generalized_eigenvalue,
                          sample_schedule, spectral_norm, stability_lines, summary_lines,
                          trivial_decomposition, variance)


def _interval_rows():
    s = assemble_interval(2, 3.0)          # h = 1
    R = s.R.toarray()
    R1 = np.zeros_like(R)
    R1[0] = R[0]
    return s, R, R1, R - R1


def test_trivial_law():
    s = assemble_interval(5)
    dec = trivial_decomposition(s.R)
    assert dec.pi.tolist() == [1.0] and dec.is_degenerate
    sched = sample_schedule(dec, 0.1, 1.0, 0)
    for t in (0.0, 0.55, 0.99):
        assert abs(batch_matrix(dec, sched, t) - s.R).max() == 0


def test_paper_law_pi(paper_small):
    _, ov, nov = paper_small
    for dec in (ov, nov):
        np.testing.assert_allclose(dec.pi, [1 / 3] * 3, rtol=1e-15)
        assert [sorted(S) for S in dec.subsets] == [[0], [1], [2]]


def test_sum_mismatch():
    _, R, R1, _ = _interval_rows()
    with pytest.raises(DecompositionError, match="sum"):
        make_decomposition([R1, R1], R=R)


def test_bad_laws():
    _, R, R1, R2 = _interval_rows()
    with pytest.raises(DecompositionError):
        make_decomposition([R1, R2], subsets=[({0}, 0.5), ({1}, 0.4)], R=R)
    with pytest.raises(DecompositionError):
        make_decomposition([R1, R2], subsets=[({0}, 1.0)], R=R)      # part 2 never drawn


def test_schedule_counts_and_determinism(paper_small):
    _, dec, _ = paper_small
    assert sample_schedule(dec, 0.25, 1.0, 0).K == 4
    assert sample_schedule(dec, 2.0, 1.0, 0).K == 1
    a = sample_schedule(dec, 0.01, 1.0, 42, 3)
    b = sample_schedule(dec, 0.01, 1.0, 42, 3)
    assert np.array_equal(a.omega, b.omega)
    assert not np.array_equal(a.omega, sample_schedule(dec, 0.01, 1.0, 42, 4).omega)


def test_schedule_prefix_stable_across_horizons(paper_small):
    _, dec, _ = paper_small
    short = sample_schedule(dec, 0.1, 1.0, 5).omega
    long = sample_schedule(dec, 0.1, 3.0, 5).omega
    assert np.array_equal(long[:short.size], short)


def test_schedule_frequencies(paper_small):
    _, dec, _ = paper_small
    omega = sample_schedule(dec, 1e-4, 1.0, 0).omega
    freq = np.bincount(omega, minlength=3) / omega.size
    np.testing.assert_allclose(freq, 1 / 3, atol=0.02)


def test_batch_matrix_scaling(paper_small):
    _, dec, _ = paper_small
    sched = sample_schedule(dec, 0.5, 1.0, 0)
    sched.omega[:] = [1, 0]
    assert abs(batch_matrix(dec, sched, 0.1) - 3 * dec.parts[1]).max() < 1e-12


def test_expectations(paper_small):
    system, ov, nov = paper_small
    F = np.random.default_rng(0).standard_normal(system.n_dof)
    for dec in (ov, nov):
        ER = sum(p * dec.batch_matrix_for(i) for i, p in enumerate(dec.probs))
        assert abs(ER - system.R).max() < 1e-12 * abs(system.R).max()
        sched = sample_schedule(dec, 1.0, 1.0, 0)
        EF = 0
        for i, p in enumerate(dec.probs):
            sched.omega[0] = i
            EF = EF + p * batch_force(dec, sched, 0.0, F)
        np.testing.assert_allclose(EF, F, rtol=1e-12, atol=1e-14)


def test_batch_force_support(paper_small):
    system, ov, _ = paper_small
    sched = sample_schedule(ov, 1.0, 1.0, 0)
    sched.omega[0] = 0
    F = np.ones(system.n_dof)
    out = batch_force(ov, sched, 0.0, F)
    assert set(np.flatnonzero(out)) <= set(ov.support(0))
    assert not batch_force(ov, sched, 0.0, np.zeros(system.n_dof)).any()
    e1 = system.dofs.edge_interior[1]
    np.testing.assert_allclose(out[e1.start:e1.stop], 3.0)


def test_schedule_index_range(paper_small):
    _, dec, _ = paper_small
    sched = sample_schedule(dec, 0.3, 1.0, 0)
    assert sched.K == 4 and sched.index(0.95) == 3
    with pytest.raises(ValueError):
        sched.index(1.0)


def test_variance_trivial_is_zero():
    assert variance(trivial_decomposition(assemble_interval(6).R)) == 0
    assert c_of_m(trivial_decomposition(assemble_interval(6).R), 1 / 7) == 0


def test_variance_row_split_oracle():
    _, R, R1, R2 = _interval_rows()
    dec = make_decomposition([R1, R2], R=R)
    oracle = np.linalg.svd(R1 - R2, compute_uv=False)[0] ** 2
    assert variance(dec) == pytest.approx(oracle, rel=1e-9)


def _paper_dec(N, h, name="paper_overlap_3"):
    system = assemble(build_paper_graph((N + 1) * h), Mesh1D(N, h))
    return system, preset(name, system)


def test_variance_scales_inverse_square_h():
    _, d1 = _paper_dec(5, 0.2)
    _, d2 = _paper_dec(5, 0.1)
    assert variance(d2) == pytest.approx(4 * variance(d1), rel=1e-8)


def test_c_of_m_independent_of_h():
    vals = [c_of_m(_paper_dec(5, h)[1], h) for h in (1.0, 0.5, 0.25)]
    assert vals[0] > 0
    np.testing.assert_allclose(vals, vals[0], rtol=1e-10)


def test_full_batch_law_has_zero_variance(paper_small):
    system, ov, _ = paper_small
    dec = make_decomposition(ov.parts, ov.force_weights, [({0, 1, 2}, 1.0)], R=system.R)
    np.testing.assert_allclose(dec.pi, 1.0)
    assert dec.is_degenerate
    assert variance(dec) < 1e-20


def test_spectral_norm_matches_dense():
    A = sp.random(60, 60, density=0.1, random_state=1)
    A = A + A.T
    assert spectral_norm(A) == pytest.approx(np.linalg.norm(A.toarray(), 2), rel=1e-8)
    assert spectral_norm(sp.csr_matrix((5, 5))) == 0


_BASE = dict(lam_min_E=0.1, norm_Einv_R=50.0, norm_Einv_y0=2.0, norm_Einv_f_L1=1.0,
             var=3.0, delta=0.01, T=1.0)


def test_trajectory_bound_limits_and_linearity():
    assert bound_trajectory(**dict(_BASE, delta=0.0)).rhs == 0
    assert bound_trajectory(**dict(_BASE, var=0.0)).rhs == 0
    full = bound_trajectory(**_BASE).rhs
    assert bound_trajectory(**dict(_BASE, delta=0.005)).rhs == pytest.approx(full / 2, rel=1e-14)
    expected = (50 * 1 + 2) * 9 * 3 / 0.01 * 0.01
    assert full == pytest.approx(expected, rel=1e-14)


_CTRL = dict(lam_min_E=0.1, norm_E=0.5, norm_Einv_R=50.0, norm_Einv_y0=2.0, norm_Einv_f=1.0,
             norm_yd=1.0, var=3.0, delta=0.01, T=1.0)


def test_control_bound():
    assert bound_control(**dict(_CTRL, delta=0.0)).rhs == 0
    assert bound_control(**dict(_CTRL, var=0.0)).rhs == 0
    a = bound_control(**_CTRL, h=0.1, c_m=2.0).shape_terms["delta_over_h11_CM"]
    b = bound_control(**_CTRL, h=0.05, c_m=2.0).shape_terms["delta_over_h11_CM"]
    assert b / a == pytest.approx(2**11, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(0.0, 10.0))
def test_bounds_nonnegative_and_linear_in_delta(delta, var):
    a = bound_trajectory(**dict(_BASE, delta=delta, var=var)).rhs
    b = bound_trajectory(**dict(_BASE, delta=2 * delta, var=var)).rhs
    assert a >= 0 and b == pytest.approx(2 * a, rel=1e-12, abs=1e-300)


def test_summary_lines(paper_small):
    _, ov, _ = paper_small
    lines = summary_lines(ov, 1.5)
    assert lines[0] == "M=3" and "pi.2=0.33333333333333331" in lines and lines[-1] == "C(M)=1.5"


def test_stability_diagnostics(paper_small):
    system, ov, nov = paper_small
    # split-edge parts are positive semidefinite; halved shared blocks are not
    for i in range(3):
        assert min_generalized_eigenvalue(nov.batch_matrix_for(i), system.E) > -1e-8
    assert min(min_generalized_eigenvalue(ov.batch_matrix_for(i), system.E) for i in range(3)) < 0
    lines = stability_lines(nov, system.E, 0.01)
    assert lines[-1] == "stability.max_ie_growth=1"
