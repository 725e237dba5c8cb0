import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gridscope import cpd
from gridscope.core import DEFAULT_FEEDER, FormatError
from gridscope.cpd import (
    CpdFactors, FitOptions, align_factors, als_fit, apply_alignment, masked_als_fit,
    normalize_factors, rank_sweep, read_fit_record, reconstruct, write_fit_record,
)
from gridscope.feeder import make_profiles, read_feeder, simulate
from gridscope.sampling import (
    FiberPattern, FiberScheme, SlabScheme, build_mask, check_fiber_conditions,
    check_slab_conditions, min_slab_requirements,
)
from gridscope.tensor import held_out_relative_error, rank_one, relative_error

TIGHT = FitOptions(max_sweeps=3000, rel_tol=1e-13, restarts=5)


def _factors(dims, F, rng):
    return CpdFactors(*(rng.standard_normal((d, F)) for d in dims))


# ===== reconstruct =====
def test_reconstruct_rank_one():
    rng = np.random.default_rng(0)
    f = _factors((3, 4, 5), 1, rng)
    assert_allclose(reconstruct(f), rank_one(f.A[:, 0], f.B[:, 0], f.C[:, 0]), rtol=1e-15)


def test_reconstruct_zero_component():
    rng = np.random.default_rng(1)
    f = _factors((3, 4, 5), 2, rng)
    A = f.A.copy()
    A[:, 1] = 0.0
    one = CpdFactors(f.A[:, :1], f.B[:, :1], f.C[:, :1])
    assert_allclose(reconstruct((A, f.B, f.C)), reconstruct(one), rtol=1e-15, atol=1e-15)


def test_reconstruct_matches_loop():
    rng = np.random.default_rng(2)
    f = _factors((4, 3, 5), 3, rng)
    X = reconstruct(f)
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected = sum(f.A[i, r] * f.B[j, r] * f.C[k, r] for r in range(3))
                assert X[i, j, k] == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_factor_shapes_validated():
    with pytest.raises(ValueError):
        CpdFactors(np.ones((4, 2)), np.ones((3, 3)), np.ones((5, 2)))
    with pytest.raises(ValueError):
        reconstruct([np.ones((2, 1)), np.ones((2, 1))])


def test_normalize_factors_convention():
    rng = np.random.default_rng(3)
    f = _factors((5, 4, 3), 3, rng)
    g = normalize_factors(f)
    assert_allclose(np.linalg.norm(g.A, axis=0), 1.0)
    assert_allclose(np.linalg.norm(g.B, axis=0), 1.0)
    assert np.all(g.A[0] > 0)
    assert_allclose(reconstruct(g), reconstruct(f), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kwargs", [{"max_sweeps": 0}, {"rel_tol": 0.0}, {"restarts": 0}, {"init_scale": -1.0}])
def test_fit_options_validated(kwargs):
    with pytest.raises(ValueError):
        FitOptions(**kwargs)


# ===== full ALS =====
def test_als_recovers_rank_one():
    rng = np.random.default_rng(4)
    X = rank_one(rng.standard_normal(6), rng.standard_normal(5), rng.standard_normal(4))
    res = als_fit(X, 1, FitOptions(seed=1))
    assert relative_error(X, reconstruct(res.factors)) <= 1e-10
    assert res.converged


def test_als_recovers_rank_three():
    rng = np.random.default_rng(5)
    X = reconstruct(_factors((10, 8, 9), 3, rng))
    res = als_fit(X, 3, TIGHT)
    assert relative_error(X, reconstruct(res.factors)) <= 1e-8
    under = als_fit(X, 2, FitOptions(seed=0))
    assert relative_error(X, reconstruct(under.factors)) > 0
    assert under.objective >= res.objective


def test_als_rejects_non_finite():
    X = np.ones((2, 2, 2))
    X[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        als_fit(X, 1)


def test_best_restart_is_reported():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((5, 4, 3))
    res = als_fit(X, 2, FitOptions(restarts=4, max_sweeps=50))
    assert len(res.restart_objectives) == 4
    assert res.objective == min(res.restart_objectives)
    assert res.restart_objectives[res.restart_index] == res.objective


# ===== masked ALS =====
@pytest.mark.slow
def test_masked_objective_trace_is_non_increasing():
    """100 random instances, each trace non-increasing per accepted sweep"""
    rng = np.random.default_rng(7)
    for trial in range(100):
        dims = tuple(int(d) for d in rng.integers(2, 7, size=3))
        X = rng.standard_normal(dims)
        M = rng.random(dims) < 0.6
        M[0, 0, 0] = True
        res = masked_als_fit(X, M, int(rng.integers(1, 4)), FitOptions(max_sweeps=30, restarts=1, seed=trial))
        trace = np.asarray(res.objective_trace)
        assert np.all(np.diff(trace) <= 1e-12 * max(1.0, trace[0]))


def test_full_mask_matches_als_fit():
    rng = np.random.default_rng(8)
    X = reconstruct(_factors((5, 4, 6), 2, rng)) + 0.01 * rng.standard_normal((5, 4, 6))
    opts = FitOptions(max_sweeps=40, restarts=2, seed=3)
    a = als_fit(X, 2, opts)
    b = masked_als_fit(X, np.ones(X.shape, dtype=bool), 2, opts)
    assert a.objective_trace == b.objective_trace
    for ma, mb in zip(a.factors.as_tuple(), b.factors.as_tuple()):
        assert_array_equal(ma, mb)


def test_mask_locality_is_bit_exact():
    """Unobserved entries are never read"""
    rng = np.random.default_rng(9)
    X = reconstruct(_factors((6, 5, 7), 2, rng))
    M = rng.random(X.shape) < 0.5
    opts = FitOptions(max_sweeps=50, restarts=2, seed=4)
    base = masked_als_fit(X, M, 2, opts)
    junk = np.where(M, X, np.nan)
    other = masked_als_fit(junk, M, 2, opts)
    big = masked_als_fit(np.where(M, X, 1e6), M, 2, opts)
    for res in (other, big):
        assert res.objective_trace == base.objective_trace
        for m1, m2 in zip(base.factors.as_tuple(), res.factors.as_tuple()):
            assert_array_equal(m1, m2)


def test_masked_rejects_bad_input():
    X = np.ones((2, 3, 4))
    with pytest.raises(ValueError):
        masked_als_fit(X, np.zeros(X.shape, dtype=bool), 1)
    with pytest.raises(ValueError):
        masked_als_fit(X, np.ones((2, 3, 5), dtype=bool), 1)
    M = np.zeros(X.shape, dtype=bool)
    M[0, 0, 0] = True
    X[0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        masked_als_fit(X, M, 1)


def test_masked_slab_recovery():
    rng = np.random.default_rng(10)
    X = reconstruct(_factors((10, 5, 12), 2, rng))
    scheme = SlabScheme(X.shape, frozenset({0, 3, 7}), frozenset({2, 9}))
    assert check_slab_conditions(scheme, 2).satisfied
    M = build_mask(scheme)
    res = masked_als_fit(X, M, 2, TIGHT)
    assert held_out_relative_error(X, reconstruct(res.factors), M) <= 1e-6


def test_undetermined_rows_are_reported():
    rng = np.random.default_rng(11)
    X = reconstruct(_factors((4, 3, 5), 2, rng))
    M = np.zeros(X.shape, dtype=bool)
    M[:, :, 0] = True
    res = masked_als_fit(X, M, 2, FitOptions(max_sweeps=100, restarts=2))
    assert res.undetermined["C"] == [1, 2, 3, 4]
    assert res.undetermined["A"] == [] and res.undetermined["B"] == []
    assert_array_equal(res.factors.C[1:], 0.0)


def test_rising_sweep_is_not_convergence(monkeypatch):
    rng = np.random.default_rng(19)
    X = reconstruct(_factors((5, 4, 6), 2, rng)) + 0.1 * rng.standard_normal((5, 4, 6))
    monkeypatch.setattr(cpd, "_als_sweep", lambda Xu, Wu, f: CpdFactors(f.A, f.B, f.C + 100.0))
    res = als_fit(X, 2, FitOptions(max_sweeps=50, restarts=1, line_search=False))
    assert not res.converged
    assert res.sweeps_used == 0 and len(res.objective_trace) == 1


def test_block_start_leads_the_restarts():
    rng = np.random.default_rng(20)
    X = reconstruct(_factors((12, 5, 20), 3, rng))
    scheme = SlabScheme(X.shape, frozenset({0, 2, 5, 9}), frozenset({4, 11}))
    assert check_slab_conditions(scheme, 3).satisfied
    M = build_mask(scheme)
    res = masked_als_fit(X, M, 3, TIGHT.replace(restarts=1))
    assert res.restart_starts == ["block_A"]
    assert res.converged
    assert held_out_relative_error(X, reconstruct(res.factors), M) <= 1e-6
    scattered = masked_als_fit(X, rng.random(X.shape) < 0.7, 3, FitOptions(max_sweeps=20, restarts=2))
    assert scattered.restart_starts == ["random", "random"]


def test_column_scaling_recovers_mixed_units():
    """Voltage-like columns near 1 next to power-like columns in the hundreds"""
    rng = np.random.default_rng(21)
    truth = _factors((14, 5, 24), 3, rng)
    B = truth.B.copy()
    B[3:] *= 300.0
    X = reconstruct(CpdFactors(truth.A, B, truth.C))
    scheme = SlabScheme(X.shape, frozenset({1, 4, 6, 10, 13}), frozenset({0, 12, 23}))
    M = build_mask(scheme)
    res = masked_als_fit(X, M, 3, TIGHT.replace(restarts=2, column_scaling=True))
    Xhat = reconstruct(res.factors)
    assert held_out_relative_error(X, Xhat, M) <= 1e-6
    assert np.abs(Xhat[:, :3] - X[:, :3])[~M[:, :3]].max() <= 1e-4 * np.abs(X[:, :3]).max()
    expected = [np.sqrt(np.mean(X[:, j][M[:, j]] ** 2)) for j in range(5)]
    assert_allclose(res.column_scales, expected, rtol=1e-12)


def test_column_scales_skip_empty_columns():
    X = np.ones((3, 4, 2))
    X[:, 1] = 5.0
    M = np.ones(X.shape, dtype=bool)
    M[:, 3] = False
    assert_allclose(cpd._column_scales(np.where(M, X, 0.0), M), [1.0, 5.0, 1.0, 1.0])


def test_line_search_keeps_the_trace_monotone():
    rng = np.random.default_rng(22)
    X = reconstruct(_factors((9, 6, 7), 4, rng)) + 1e-3 * rng.standard_normal((9, 6, 7))
    M = rng.random(X.shape) < 0.8
    on = masked_als_fit(X, M, 4, FitOptions(max_sweeps=200, restarts=1, seed=2))
    off = masked_als_fit(X, M, 4, FitOptions(max_sweeps=200, restarts=1, seed=2, line_search=False))
    for res in (on, off):
        assert np.all(np.diff(res.objective_trace) <= 0.0)
    assert on.objective_trace[:6] == off.objective_trace[:6]


@pytest.mark.slow
def test_single_frontal_slab_is_not_identifiable():
    """Training fit is exact but held-out entries are not recovered"""
    hits = 0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        X = reconstruct(_factors((6, 5, 8), 2, rng))
        M = np.zeros(X.shape, dtype=bool)
        M[:, :, int(rng.integers(8))] = True
        res = masked_als_fit(X, M, 2, TIGHT.replace(seed=trial))
        train = res.objective / float(np.sum(X[M] ** 2))
        held = held_out_relative_error(X, reconstruct(res.factors), M)
        hits += train < 1e-10 and held > 0.1
    assert hits >= 18


# ===== alignment =====
def test_align_identity():
    rng = np.random.default_rng(12)
    f = _factors((6, 5, 4), 3, rng)
    al = align_factors(f, f)
    assert_array_equal(al.permutation, [0, 1, 2])
    assert_allclose(al.scalings, 1.0, rtol=1e-12)
    assert al.match_error <= 1e-24


def test_align_swapped_and_scaled():
    rng = np.random.default_rng(13)
    truth = _factors((6, 5, 4), 2, rng)
    swap = [1, 0]
    est = CpdFactors(truth.A[:, swap] * 2.0, truth.B[:, swap] * 0.5, truth.C[:, swap])
    al = align_factors(est, truth)
    assert_array_equal(al.permutation, swap)
    assert al.match_error <= 1e-12
    aligned = apply_alignment(est, al.permutation, al.scalings)
    assert_allclose(reconstruct(aligned), reconstruct(truth), rtol=1e-12, atol=1e-12)


def test_reconstruct_invariant_under_permutation_and_scaling():
    rng = np.random.default_rng(14)
    f = _factors((5, 4, 6), 4, rng)
    perm = rng.permutation(4)
    lam = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    lam[2] = 1.0 / (lam[0] * lam[1])
    X = reconstruct(f)
    Y = reconstruct(apply_alignment(f, perm, lam))
    assert relative_error(X, Y) <= 1e-24


def test_align_rank_mismatch():
    rng = np.random.default_rng(15)
    with pytest.raises(ValueError):
        align_factors(_factors((3, 3, 3), 2, rng), _factors((3, 3, 3), 3, rng))


@pytest.mark.slow
def test_generate_and_recover_full_observation():
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(200 + trial)
        truth = _factors((8, 7, 6), 3, rng)
        res = als_fit(reconstruct(truth), 3, TIGHT.replace(seed=trial))
        hits += align_factors(res.factors, truth).match_error <= 1e-6
    assert hits >= 95


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["slab", "fiber"])
def test_exact_recovery_under_certified_sampling(kind):
    dims, F = (20, 5, 24), 3
    hits = 0
    for trial in range(50):
        rng = np.random.default_rng(300 + trial)
        truth = _factors(dims, F, rng)
        if kind == "slab":
            ih, kf = min_slab_requirements(*dims, F).minimal_pairs[0]
            scheme = SlabScheme(dims, frozenset(rng.choice(dims[0], ih, replace=False).tolist()),
                                frozenset(rng.choice(dims[2], kf, replace=False).tolist()))
            assert check_slab_conditions(scheme, F).satisfied
        else:
            rows = rng.permutation(dims[0])
            scheme = FiberScheme(dims, (FiberPattern(frozenset(rows[:12].tolist()), frozenset({0, 1, 2})),
                                        FiberPattern(frozenset(rows[8:].tolist()), frozenset({3, 4}))))
            assert check_fiber_conditions(scheme, F).satisfied
        X = reconstruct(truth)
        M = build_mask(scheme)
        res = masked_als_fit(X, M, F, TIGHT.replace(seed=trial))
        ok = (align_factors(res.factors, truth).match_error <= 1e-5
              and held_out_relative_error(X, reconstruct(res.factors), M) <= 1e-6)
        hits += ok
    assert hits >= 45


# ===== rank sweep =====
def test_rank_sweep_exact_rank_five():
    rng = np.random.default_rng(16)
    X = reconstruct(_factors((10, 9, 8), 5, rng))
    points = rank_sweep(X, 5, TIGHT)
    assert [k for k, _ in points] == [1, 2, 3, 4, 5]
    errors = np.array([e for _, e in points])
    assert errors[4] <= 1e-8
    assert np.all(errors[:4] > 0)
    assert np.all(np.diff(errors) <= 1e-10)


@pytest.mark.slow
def test_rank_sweep_default_feeder():
    """Error falls with k and is tiny by k = 11 on the consecutive 72-step tensor"""
    feeder = read_feeder(DEFAULT_FEEDER)
    X, _ = simulate(feeder, make_profiles(feeder, "consecutive", 72, seed=0))
    points = rank_sweep(X, 11, FitOptions(max_sweeps=1000, rel_tol=1e-10, restarts=5))
    errors = np.array([e for _, e in points])
    assert np.all(np.diff(errors) <= 1e-10)
    assert errors[-1] <= 1e-3


def test_rank_sweep_single_point():
    rng = np.random.default_rng(17)
    X = rank_one(rng.standard_normal(4), rng.standard_normal(3), rng.standard_normal(5))
    points = rank_sweep(X, 1)
    assert len(points) == 1 and points[0][0] == 1
    assert points[0][1] <= 1e-10


def test_rank_sweep_validates():
    with pytest.raises(ValueError):
        rank_sweep(np.ones((2, 2, 2)), 0)
    with pytest.raises(ValueError):
        rank_sweep(np.zeros((2, 2, 2)), 2)


# ===== fit records =====
def test_fit_record_file(tmp_path):
    rng = np.random.default_rng(18)
    X = reconstruct(_factors((4, 3, 5), 2, rng))
    M = np.ones(X.shape, dtype=bool)
    M[2] = False
    res = masked_als_fit(X, M, 2, FitOptions(max_sweeps=20, restarts=2))
    path = tmp_path / "fit.txt"
    write_fit_record(res, path)
    back = read_fit_record(path)
    for m1, m2 in zip(res.factors.as_tuple(), back.factors.as_tuple()):
        assert_array_equal(m1, m2)
    assert back.objective_trace == res.objective_trace
    assert back.undetermined == {"A": [2], "B": [], "C": []}
    assert back.restart_starts == res.restart_starts == ["block_A", "random"]
    assert back.column_scales is None
    assert (back.converged, back.sweeps_used, back.restart_index) == \
        (res.converged, res.sweeps_used, res.restart_index)


def test_fit_record_missing_block(tmp_path):
    path = tmp_path / "fit.txt"
    path.write_text("rank 1\nconverged 1\nsweeps_used 1\nrestart_index 0\n[A]\n1 1 1\n1\n")
    with pytest.raises(FormatError, match="missing factor blocks"):
        read_fit_record(path)
