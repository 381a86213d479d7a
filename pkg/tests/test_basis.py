import numpy as np
import pytest

from careercurves.basis import (
    KnotSet,
    aligned_times,
    bspline_basis,
    design_matrix,
    penalty_matrix,
    zero_columns,
)
from oracles import mvn_logpdf, naive_basis_row, random_walk_logpdf

# Frozen from the naive Cox-de Boor recursion in oracles.naive_basis_row
# for degree 3, five inner knots, z = 0.37.
ROW_Q3_P5_Z037 = np.array(
    [0.0, 0.0, 0.07909199999999998, 0.6235906666666665,
     0.2955426666666667, 0.00177466666666667, 0.0, 0.0, 0.0]
)


def test_partition_of_unity():
    rng = np.random.default_rng(7)
    z = rng.uniform(0.0, 1.0, size=10_000)
    for p, q in [(5, 3), (15, 3), (3, 2), (1, 0)]:
        B = bspline_basis(z, KnotSet(p, q))
        assert np.max(np.abs(B.sum(axis=1) - 1.0)) <= 1e-12


def test_local_support():
    rng = np.random.default_rng(8)
    z = rng.uniform(0.0, 1.0, size=2_000)
    for p, q in [(5, 3), (12, 2), (8, 1), (4, 0)]:
        B = bspline_basis(z, KnotSet(p, q))
        assert np.all((B > 0).sum(axis=1) <= q + 1)
        assert B.min() >= 0.0 and B.max() <= 1.0


def test_degree_zero_indicator():
    B = bspline_basis([0.25], KnotSet(1, 0))
    assert B.shape == (1, 2)
    np.testing.assert_array_equal(B[0], [1.0, 0.0])


def test_cubic_row_matches_recursion_oracle():
    B = bspline_basis([0.37], KnotSet(5, 3))
    np.testing.assert_allclose(B[0], ROW_Q3_P5_Z037, atol=1e-14)


def test_matches_oracle_at_random_points():
    rng = np.random.default_rng(9)
    for p, q in [(5, 3), (7, 2), (3, 1)]:
        ks = KnotSet(p, q)
        for z in np.append(rng.uniform(0, 1, 20), [0.0, 1.0]):
            np.testing.assert_allclose(
                bspline_basis([z], ks)[0], naive_basis_row(z, p, q), atol=1e-13
            )


def test_domain_errors_and_empty():
    ks = KnotSet(5, 3)
    with pytest.raises(ValueError):
        bspline_basis([-0.01], ks)
    with pytest.raises(ValueError):
        bspline_basis([1.01], ks)
    assert bspline_basis([], ks).shape == (0, ks.dimension)


def test_aligned_times():
    np.testing.assert_allclose(aligned_times(4, 4), [0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(aligned_times(8, 4), [0.125, 0.25, 0.375, 0.5])
    assert aligned_times(1383, 1383)[-1] == 1.0
    with pytest.raises(ValueError):
        aligned_times(4, 5)


def test_design_matrix_zero_columns():
    ks = KnotSet(15, 3)
    # retired player: no all-zero columns
    H = design_matrix(aligned_times(80, 80), ks)
    assert zero_columns(H).size == 0
    # active player observed through half the career: columns supported
    # strictly above 0.5 are zero (count frozen from the knot layout oracle)
    H = design_matrix(aligned_times(80, 40), ks)
    np.testing.assert_array_equal(zero_columns(H), np.arange(11, 19))
    # single observed game at z close to 0 with q=0: one positive entry
    H = design_matrix([0.0], KnotSet(1, 0))
    assert (H != 0).sum() == 1


def test_design_matrix_censoring_boundary():
    ks = KnotSet(8, 3)
    retired = design_matrix(aligned_times(60, 60), ks)
    active_full = design_matrix(aligned_times(60, 60), ks)
    np.testing.assert_array_equal(retired, active_full)


def test_penalty_matrix_d1_exact():
    K = penalty_matrix(3, d=1, v=1.0)
    np.testing.assert_allclose(K, [[2, -1, 0], [-1, 2, -1], [0, -1, 1]], atol=1e-12)


def test_penalty_matrix_large_v_pins_first_coordinate():
    v = 1e4
    K = penalty_matrix(5, d=1, v=v)
    assert K[0, 0] == pytest.approx(v**2 + 1.0)


def test_penalty_matrix_errors():
    with pytest.raises(ValueError):
        penalty_matrix(2, d=2)
    with pytest.raises(ValueError):
        penalty_matrix(5, d=0)


def test_penalty_density_equivalence():
    # N(0, tau2 K^-1) log density must equal the sequential random-walk
    # factorization, which also pins the normalizing determinant.
    rng = np.random.default_rng(10)
    for P in (3, 5, 8):
        for d in (1, 2):
            for v in (0.5, 1.0, 2.0):
                K = penalty_matrix(P, d=d, v=v)
                tau2 = float(rng.uniform(0.2, 3.0))
                cov = tau2 * np.linalg.inv(K)
                for _ in range(20):
                    theta = rng.normal(scale=2.0, size=P)
                    lhs = mvn_logpdf(theta, np.zeros(P), cov)
                    rhs = random_walk_logpdf(theta, d, v, tau2)
                    assert abs(lhs - rhs) <= 1e-8


def test_penalty_positive_definite():
    for P, d, v in [(6, 1, 1.0), (6, 2, 0.5), (9, 2, 2.0)]:
        w = np.linalg.eigvalsh(penalty_matrix(P, d, v))
        assert w.min() > 0.0
