import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import digamma, expit

from cmnet._linalg import SingularPrecisionError, cholesky, spd_inverse
from cmnet.distributions import (
    DomainError,
    GaussianNatural,
    MatrixNormalGamma,
    PGState,
    StickBreakingCoefficients,
    gamma_kl,
    kappa_vector,
    log_cosh,
    log_stick_breaking,
    mng_expectations,
    moments_to_natural,
    natural_to_moments,
    pg_kl,
    pg_mean,
    stick_breaking_probs,
)


def neg_log_cosh_in_c(b, c):
    return -b * log_cosh(np.sqrt(2.0 * c) / 2.0)


class TestPolyaGamma:
    def test_zero_tilt_limit(self):
        assert pg_mean(1, 0) == 0.25
        assert pg_mean(2, 0) == 0.5

    def test_closed_form_value(self):
        assert pg_mean(1, 2) == pytest.approx(math.tanh(1.0) / 4.0, abs=1e-15)
        assert pg_mean(1, 2) == pytest.approx(0.190399, abs=5e-7)

    def test_kl_values(self):
        assert pg_kl(1, 0) == 0.0
        want = math.log(math.cosh(1.0)) - 0.5 * math.tanh(1.0)
        assert pg_kl(1, 2) == pytest.approx(want, abs=1e-15)
        assert pg_kl(1, 2) == pytest.approx(0.052984, abs=5e-7)
        assert pg_kl(3, 2) == pytest.approx(3 * pg_kl(1, 2), rel=1e-14)

    def test_mean_is_derivative_of_log_cosh(self):
        xi = np.linspace(0.1, 10.0, 100)
        c = xi**2 / 2
        h = 1e-6 * np.maximum(c, 1.0)
        fd = (neg_log_cosh_in_c(1.0, c + h) - neg_log_cosh_in_c(1.0, c - h)) / (2 * h)
        np.testing.assert_allclose(pg_mean(1.0, xi), -fd, atol=1e-6)

    def test_algebraic_identity(self):
        xi = np.geomspace(1e-3, 50, 200)
        for b in (0.5, 1.0, 2.0):
            np.testing.assert_allclose(pg_mean(b, xi) * xi, 0.5 * b * np.tanh(xi / 2), rtol=0, atol=1e-12)

    def test_series_switch_is_smooth(self):
        t = 1e-4
        below = pg_mean(1.0, np.nextafter(t, 0))
        exact = math.tanh(t / 2) / (2 * t)
        assert abs(below - exact) / exact < 1e-12
        assert abs(pg_mean(1.0, t) - exact) / exact < 1e-12

    def test_large_tilt_finite(self):
        assert np.isfinite(pg_kl(1.0, 1e6))
        assert pg_mean(1.0, 1e6) == pytest.approx(0.5e-6)

    @given(st.floats(0.0, 1e3), st.floats(0.0, 5.0))
    def test_kl_nonnegative(self, xi, b):
        assert pg_kl(b, xi) >= 0.0

    def test_kl_positive_away_from_zero(self):
        xi = np.geomspace(1e-2, 100, 50)
        assert np.all(pg_kl(1.0, xi) > 0)

    def test_negative_arguments_rejected(self):
        with pytest.raises(DomainError):
            pg_mean(1.0, -0.1)
        with pytest.raises(DomainError):
            pg_kl(-1.0, 0.5)
        with pytest.raises(DomainError):
            PGState(1.0, -1.0, 0.5)

    def test_state_properties(self):
        s = PGState(1.0, 2.0, 0.5)
        assert s.mean == pg_mean(1.0, 2.0)
        assert s.kl == pg_kl(1.0, 2.0)


class TestGaussian:
    def test_standard_normal(self):
        mean, cov = natural_to_moments(GaussianNatural(np.zeros(2), -0.5 * np.eye(2)))
        np.testing.assert_array_equal(mean, 0.0)
        np.testing.assert_allclose(cov, np.eye(2), atol=1e-15)

    def test_diagonal_by_hand(self):
        mean, cov = natural_to_moments(GaussianNatural(np.array([2.0, 0.0]), -np.eye(2)))
        np.testing.assert_allclose(mean, [1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(cov, 0.5 * np.eye(2), atol=1e-15)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 4))
        cov = a @ a.T + 0.5 * np.eye(4)
        mean = rng.standard_normal(4)
        m2, c2 = natural_to_moments(GaussianNatural.from_moments(mean, cov))
        np.testing.assert_allclose(m2, mean, atol=1e-10)
        np.testing.assert_allclose(c2, cov, atol=1e-10)
        l1, l2 = moments_to_natural(mean, cov)
        np.testing.assert_allclose(l2, -0.5 * np.linalg.inv(cov), atol=1e-10)

    def test_batched(self):
        g = GaussianNatural(np.ones((3, 2)), np.broadcast_to(-0.5 * np.eye(2), (3, 2, 2)))
        mean, cov = g.moments()
        assert mean.shape == (3, 2) and cov.shape == (3, 2, 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            GaussianNatural(np.zeros(3), -np.eye(2))

    def test_singular_precision(self):
        with pytest.raises(SingularPrecisionError):
            natural_to_moments(GaussianNatural(np.zeros(2), np.zeros((2, 2))))


class TestLinalg:
    def test_jitter_recovers_near_singular(self):
        v = np.array([1.0, 1.0])
        a = np.outer(v, v) - 1e-14 * np.eye(2)
        counters = Counter()
        L = cholesky(a, counters)
        assert counters["jitter"] >= 1
        assert np.all(np.isfinite(L))

    def test_error_reports_batch_index(self):
        a = np.stack([np.eye(2), -np.eye(2)])
        with pytest.raises(SingularPrecisionError) as info:
            spd_inverse(a)
        assert info.value.index == (1,)
        assert info.value.min_diagonal == -1.0

    def test_inverse_and_logdet(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 5))
        spd = a @ a.T + np.eye(5)
        inv, logdet = spd_inverse(spd)
        np.testing.assert_allclose(inv @ spd, np.eye(5), atol=1e-10)
        assert logdet == pytest.approx(np.linalg.slogdet(spd)[1], rel=1e-12)


class TestMatrixNormalGamma:
    def test_hand_case(self):
        p = MatrixNormalGamma(np.zeros((1, 2)), np.eye(2), 2.0, np.ones(1))
        e = mng_expectations(p)
        np.testing.assert_allclose(e.precision, [2.0])
        np.testing.assert_allclose(e.quad, np.eye(2))
        assert e.logdet_precision == pytest.approx(digamma(2.0), abs=1e-15)
        assert e.logdet_precision == pytest.approx(0.42278, abs=5e-6)

    def test_point_mass_columns(self):
        M = np.array([[1.0, 2.0], [0.5, -1.0]])
        p = MatrixNormalGamma(M, 1e-300 * np.eye(2), 3.0, np.full(2, 3.0), np.eye(2))
        np.testing.assert_allclose(mng_expectations(p).quad, M.T @ M, atol=1e-12)

    def test_quad_identity_and_psd(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            h, q = rng.integers(1, 4), rng.integers(1, 5)
            a = rng.standard_normal((q, q))
            V = a @ a.T + 0.1 * np.eye(q)
            M = rng.standard_normal((h, q))
            b = rng.uniform(0.5, 3.0, h)
            p = MatrixNormalGamma(M, V, 2.5, b)
            e = mng_expectations(p)
            tau = 2.5 / b
            np.testing.assert_allclose(e.quad - M.T @ np.diag(tau) @ M, h * p.V, atol=1e-12)
            np.testing.assert_allclose(e.quad, e.quad.T, atol=0)
            assert np.linalg.eigvalsh(e.quad).min() > -1e-12

    def test_invalid_gamma(self):
        with pytest.raises(DomainError):
            MatrixNormalGamma(np.zeros((1, 2)), np.eye(2), 0.0, np.ones(1))

    def test_gamma_kl_zero_and_positive(self):
        assert gamma_kl(2.0, 1.0, 2.0, 1.0) == pytest.approx(0.0, abs=1e-15)
        assert gamma_kl(5.0, 2.0, 2.0, 1.0) > 0


class TestStickBreaking:
    def test_zero_coefficients(self):
        p = stick_breaking_probs(StickBreakingCoefficients(np.zeros((2, 3))), np.array([0.3, -2.0]))
        np.testing.assert_allclose(p, [0.5, 0.25, 0.25], atol=1e-15)

    def test_binary_is_logistic(self):
        beta = np.array([[0.7, -0.2]])
        x = np.array([1.3])
        z = 0.7 * 1.3 - 0.2
        np.testing.assert_allclose(stick_breaking_probs(beta, x), [expit(z), 1 - expit(z)], atol=1e-15)

    def test_underflow(self):
        psi = np.array([-50.0, -50.0])
        logp = log_stick_breaking(psi)
        assert np.all(np.isfinite(logp))
        np.testing.assert_allclose(np.exp(logp), [0, 0, 1], atol=1e-20)
        assert logp[0] == pytest.approx(-50.0, abs=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            C = rng.integers(2, 7)
            m = rng.integers(1, 4)
            beta = 3 * rng.standard_normal((C - 1, m + 1))
            x = 3 * rng.standard_normal(m)
            assert abs(stick_breaking_probs(beta, x).sum() - 1.0) < 1e-12

    def test_nonfinite_input(self):
        with pytest.raises(DomainError):
            stick_breaking_probs(np.zeros((1, 2)), np.array([np.nan]))

    def test_kappa_examples(self):
        # the examples use 1-based classes; the API is 0-based
        k, b = kappa_vector(0, 3)
        np.testing.assert_array_equal(k, [0.5, 0.0])
        np.testing.assert_array_equal(b, [1, 0])
        k, b = kappa_vector(2, 3)
        np.testing.assert_array_equal(k, [-0.5, -0.5])
        np.testing.assert_array_equal(b, [1, 1])
        k, b = kappa_vector(1, 4)
        np.testing.assert_array_equal(k, [-0.5, 0.5, 0.0])
        np.testing.assert_array_equal(b, [1, 1, 0])

    def test_kappa_out_of_range(self):
        with pytest.raises(DomainError):
            kappa_vector(3, 3)
        with pytest.raises(DomainError):
            kappa_vector(-1, 3)

    def test_augmented_likelihood_matches_probs(self):
        # ln p(y | psi) = sum_k [kappa_k psi_k - b_k ln(2 cosh(psi_k / 2))]
        rng = np.random.default_rng(5)
        for _ in range(200):
            C = rng.integers(2, 6)
            psi = 4 * rng.standard_normal(C - 1)
            y = rng.integers(C)
            kappa, b = kappa_vector(y, C)
            direct = np.sum(kappa * psi - b * (np.log(2.0) + log_cosh(psi / 2)))
            assert direct == pytest.approx(log_stick_breaking(psi)[y], abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-700, 700), min_size=1, max_size=6))
    def test_log_probs_normalized(self, psi):
        logp = log_stick_breaking(np.array(psi))
        assert np.all(np.isfinite(logp))
        assert abs(np.exp(logp).sum() - 1.0) < 1e-12
