import numpy as np
import pytest
import scipy.linalg
import scipy.stats
from numpy.testing import assert_allclose

from stochtrace import (
    DegeneratePairError,
    InvalidInputError,
    RankDeficientError,
    RotationStrategy,
    SingularFactorError,
    economy_qr,
    next_rotation,
    orth_basis,
    ql_orthonormalize_pair,
    sample_gaussian,
    sample_haar_orthogonal,
    solve_transposed_upper,
)

# asymptotic one-sided critical value of the KS statistic at the 1% level
KS_CRIT_1PCT = 1.6276


def max_principal_angle(a, b):
    return scipy.linalg.subspace_angles(a, b).max() if a.size and b.size else 0.0


class TestEconomyQR:
    def test_identity_input(self):
        f = economy_qr(np.eye(3))
        assert_allclose(f.q, np.eye(3), atol=1e-15)
        assert_allclose(f.r, np.eye(3), atol=1e-15)

    def test_scaled_orthogonal_columns(self):
        m = np.array([[2.0, 0.0], [0.0, 0.0], [0.0, 3.0]])
        f = economy_qr(m)
        assert_allclose(f.q, np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]), atol=1e-15)
        assert_allclose(f.r, np.diag([2.0, 3.0]), atol=1e-15)

    def test_reconstructs_random_block(self):
        m = np.random.default_rng(0).standard_normal((50, 5))
        f = economy_qr(m)
        assert np.linalg.norm(f.q @ f.r - m) <= 1e-12 * np.linalg.norm(m)
        assert np.abs(f.q.T @ f.q - np.eye(5)).max() <= 1e-12
        assert (np.diag(f.r) > 0).all()
        assert_allclose(np.tril(f.r, -1), 0.0, atol=1e-14)

    def test_deterministic(self):
        m = np.random.default_rng(3).standard_normal((20, 4))
        f1, f2 = economy_qr(m), economy_qr(m.copy())
        assert np.array_equal(f1.q, f2.q) and np.array_equal(f1.r, f2.r)

    def test_rank_deficiency_reports_offending_column(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((8, 3))
        m = np.column_stack([m[:, 0], m[:, 1], m[:, 0] + m[:, 1]])
        with pytest.raises(RankDeficientError) as err:
            economy_qr(m)
        assert err.value.index == 2

    def test_rejects_wide_or_empty(self):
        with pytest.raises(InvalidInputError):
            economy_qr(np.ones((2, 3)))
        with pytest.raises(InvalidInputError):
            economy_qr(np.ones((3, 0)))


class TestOrthBasis:
    def test_full_rank_is_orthonormal_with_same_span(self):
        m = np.random.default_rng(2).standard_normal((30, 6))
        q = orth_basis(m)
        assert q.shape == (30, 6)
        assert np.abs(q.T @ q - np.eye(6)).max() <= 1e-12
        assert max_principal_angle(q, scipy.linalg.orth(m)) <= 1e-10

    def test_duplicate_columns_truncated(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal(12), rng.standard_normal(12)
        q = orth_basis(np.column_stack([a, a, b, 3.0 * b]))
        assert q.shape[1] == 2
        assert max_principal_angle(q, scipy.linalg.orth(np.column_stack([a, b]))) <= 1e-10

    def test_wide_block(self):
        m = np.random.default_rng(4).standard_normal((5, 12))
        q = orth_basis(m)
        assert q.shape == (5, 5)
        assert np.abs(q.T @ q - np.eye(5)).max() <= 1e-12

    def test_zero_block(self):
        assert orth_basis(np.zeros((7, 3))).shape == (7, 0)

    def test_two_scale_rank_decision(self):
        # columns paired with their images under a {1, 1e-3} spectrum: the
        # nine extra columns are exact dependencies and must all drop
        rng = np.random.default_rng(5)
        lam = np.concatenate([np.ones(5), 1e-3 * np.ones(45)])
        omega = rng.standard_normal((50, 12))
        block = np.hstack([omega, lam[:, None] * omega])
        q = orth_basis(block)
        assert q.shape[1] == 5 + 12


class TestSolveTransposedUpper:
    def test_identity(self):
        b = np.random.default_rng(0).standard_normal((4, 2))
        assert_allclose(solve_transposed_upper(np.eye(4), b), b)

    def test_hand_two_by_two(self):
        r = np.array([[2.0, 1.0], [0.0, 3.0]])
        x = solve_transposed_upper(r, np.eye(2)[:, 0])
        assert_allclose(x, [0.5, -1.0 / 6.0], rtol=1e-15)

    def test_residual(self):
        rng = np.random.default_rng(6)
        r = np.triu(rng.standard_normal((8, 8))) + 4.0 * np.eye(8)
        b = rng.standard_normal((8, 3))
        x = solve_transposed_upper(r, b)
        assert np.linalg.norm(r.T @ x - b) <= 1e-12 * np.linalg.norm(b)

    def test_singular_raises(self):
        r = np.array([[1.0, 2.0], [0.0, 0.0]])
        with pytest.raises(SingularFactorError):
            solve_transposed_upper(r, np.ones(2))


class TestQLOrthonormalizePair:
    def test_hand_example(self):
        s = np.array([[1.0, 0.0], [1.0, 1.0]])
        s_tilde, lower = ql_orthonormalize_pair(s)
        assert_allclose(s_tilde, np.eye(2), atol=1e-15)
        assert_allclose(lower, np.array([[1.0, 0.0], [1.0, 1.0]]), atol=1e-15)

    def test_orthonormal_input_passthrough(self):
        q = economy_qr(np.random.default_rng(1).standard_normal((6, 2))).q
        s_tilde, lower = ql_orthonormalize_pair(q)
        assert_allclose(s_tilde, q, atol=1e-12)
        assert_allclose(lower, np.eye(2), atol=1e-12)

    def test_random_reconstruction(self):
        s = np.random.default_rng(2).standard_normal((9, 2))
        s_tilde, lower = ql_orthonormalize_pair(s)
        assert np.abs(s_tilde.T @ s_tilde - np.eye(2)).max() <= 1e-12
        assert np.linalg.norm(s_tilde @ lower - s) <= 1e-12 * np.linalg.norm(s)
        assert lower[0, 1] == 0.0
        assert max_principal_angle(s_tilde, scipy.linalg.orth(s)) <= 1e-10

    def test_degenerate_second_column(self):
        s = np.column_stack([np.ones(4), np.zeros(4)])
        with pytest.raises(DegeneratePairError):
            ql_orthonormalize_pair(s)

    def test_parallel_columns(self):
        v = np.arange(1.0, 5.0)
        with pytest.raises(DegeneratePairError):
            ql_orthonormalize_pair(np.column_stack([2.0 * v, v]))


class TestSampleGaussian:
    def test_deterministic_given_seed(self):
        a = sample_gaussian(np.random.default_rng(9), 12, 3)
        b = sample_gaussian(np.random.default_rng(9), 12, 3)
        assert np.array_equal(a, b)

    def test_seeds_differ(self):
        a = sample_gaussian(np.random.default_rng(1), 12, 3)
        b = sample_gaussian(np.random.default_rng(2), 12, 3)
        assert not np.array_equal(a, b)

    def test_moments(self):
        x = sample_gaussian(np.random.default_rng(7), 10_000, 1).ravel()
        assert abs(x.mean()) <= 4.0 / np.sqrt(10_000)
        assert abs(x.var() - 1.0) <= 0.1

    def test_rejects_bad_shape(self):
        with pytest.raises(InvalidInputError):
            sample_gaussian(np.random.default_rng(0), 0, 3)


class TestSampleHaarOrthogonal:
    def test_orthogonality(self):
        u = sample_haar_orthogonal(np.random.default_rng(0), 7)
        assert np.abs(u.T @ u - np.eye(7)).max() <= 1e-12

    def test_batch_orthogonality(self):
        us = sample_haar_orthogonal(np.random.default_rng(1), 5, size=64)
        assert us.shape == (64, 5, 5)
        gram = np.einsum("kij,kil->kjl", us, us)
        assert np.abs(gram - np.eye(5)).max() <= 1e-12

    def test_first_column_angle_uniform(self):
        n = 100_000
        us = sample_haar_orthogonal(np.random.default_rng(2), 2, size=n)
        angles = np.mod(np.arctan2(us[:, 1, 0], us[:, 0, 0]), 2.0 * np.pi)
        stat = scipy.stats.kstest(angles, "uniform", args=(0.0, 2.0 * np.pi)).statistic
        assert stat < KS_CRIT_1PCT / np.sqrt(n)

    def test_conjugation_averages_to_scaled_identity(self):
        n = 100_000
        m = np.array([[1.0, 0.3, 0.3], [0.3, 2.0, 0.3], [0.3, 0.3, 3.0]])
        us = sample_haar_orthogonal(np.random.default_rng(3), 3, size=n)
        conj = np.einsum("kij,jl,kml->kim", us, m, us)
        target = np.trace(m) / 3.0 * np.eye(3)
        se = conj.std(axis=0, ddof=1) / np.sqrt(n)
        assert (np.abs(conj.mean(axis=0) - target) <= 4.0 * se).all()

    def test_left_invariance_of_trace_distribution(self):
        n = 100_000
        rng = np.random.default_rng(4)
        v = sample_haar_orthogonal(rng, 3)
        us = sample_haar_orthogonal(rng, 3, size=2 * n)
        plain = np.einsum("kii->k", us[:n])
        rotated = np.einsum("ij,kji->k", v, us[n:])
        assert scipy.stats.ks_2samp(plain, rotated).pvalue > 0.01

    def test_deterministic(self):
        a = sample_haar_orthogonal(np.random.default_rng(5), 4)
        b = sample_haar_orthogonal(np.random.default_rng(5), 4)
        assert np.array_equal(a, b)


class TestRotationStrategies:
    def test_identity_first_haar(self):
        strat = RotationStrategy("identity-first-haar")
        rng = np.random.default_rng(0)
        first = next_rotation(strat, rng, 4)
        assert np.array_equal(first, np.eye(4))
        second = next_rotation(strat, rng, 4)
        assert not np.array_equal(second, np.eye(4))
        assert np.abs(second.T @ second - np.eye(4)).max() <= 1e-12

    def test_identity_first_batch_matches_sequential(self):
        batch = RotationStrategy("identity-first-haar").draw(
            np.random.default_rng(3), 3, count=4
        )
        strat = RotationStrategy("identity-first-haar")
        rng = np.random.default_rng(3)
        seq = np.stack([next_rotation(strat, rng, 3) for _ in range(4)])
        assert np.array_equal(batch, seq)

    def test_unit_vectors(self):
        strat = RotationStrategy("iid-unit-vectors")
        vecs = strat.draw(np.random.default_rng(1), 6, count=50)
        assert vecs.shape == (50, 6)
        assert_allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-12)

    def test_kac_walk_stays_orthogonal(self):
        strat = RotationStrategy("kac-walk")
        rng = np.random.default_rng(2)
        for _ in range(30):
            u = next_rotation(strat, rng, 5)
        assert np.abs(u.T @ u - np.eye(5)).max() <= 1e-12

    def test_kac_walk_advances_state(self):
        strat = RotationStrategy("kac-walk")
        rng = np.random.default_rng(4)
        a = next_rotation(strat, rng, 4)
        b = next_rotation(strat, rng, 4)
        assert not np.array_equal(a, b)

    def test_kac_walk_deterministic(self):
        out = []
        for _ in range(2):
            strat = RotationStrategy("kac-walk")
            out.append(strat.draw(np.random.default_rng(5), 4, count=3))
        assert np.array_equal(out[0], out[1])

    def test_kac_walk_dimension_pinned_by_state(self):
        strat = RotationStrategy("kac-walk")
        rng = np.random.default_rng(6)
        next_rotation(strat, rng, 4)
        with pytest.raises(InvalidInputError):
            next_rotation(strat, rng, 5)

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidInputError):
            RotationStrategy("sobol")
