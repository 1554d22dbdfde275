from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from bandit_lab import ndcore as nd
from bandit_lab.dists import DiagGaussian, kl_diag, log_mean_exp, logpdf, reparam_sample
from bandit_lab.ndcore import ContractError, NumericError, ShapeError


class TestLogpdf:
    @given(st.integers(0, 10_000))
    def test_matches_scipy(self, seed):
        rng = np.random.default_rng(seed)
        mean, std, x = rng.standard_normal(4), rng.uniform(0.1, 3.0, 4), rng.standard_normal(4)
        np.testing.assert_allclose(logpdf(DiagGaussian(mean, std), x).data, stats.norm.logpdf(x, mean, std))

    def test_standard_normal_at_zero(self):
        assert logpdf(DiagGaussian([0.0], [1.0]), [0.0]).data[0] == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_gradients_wrt_mean_and_std(self):
        m, s = nd.parameter([0.3]), nd.parameter([2.0])
        gm, gs = nd.backward(logpdf(DiagGaussian(m, s), [1.0]).sum(), [m, s])
        # d/dm = (x - m) / s^2, d/ds = -1/s + (x - m)^2 / s^3
        assert gm[0] == pytest.approx(0.7 / 4.0)
        assert gs[0] == pytest.approx(-0.5 + 0.49 / 8.0)

    def test_rejects_non_positive_std(self):
        with pytest.raises(NumericError):
            DiagGaussian([0.0, 0.0], [1.0, 0.0])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            DiagGaussian(np.zeros(3), np.ones(2))
        with pytest.raises(ShapeError):
            logpdf(DiagGaussian(np.zeros(3), np.ones(3)), np.zeros(4))


class TestReparamSample:
    def test_moments(self):
        rng = np.random.default_rng(0)
        d = DiagGaussian(np.full((100_000, 2), [1.0, -2.0]), np.full((100_000, 2), [0.5, 3.0]))
        z = reparam_sample(d, rng.standard_normal((100_000, 2))).data
        se_mean = np.array([0.5, 3.0]) / math.sqrt(100_000)
        assert (np.abs(z.mean(axis=0) - [1.0, -2.0]) < 4 * se_mean).all()
        np.testing.assert_allclose(z.std(axis=0), [0.5, 3.0], rtol=0.02)

    def test_noise_shape_must_match(self):
        with pytest.raises(ShapeError):
            reparam_sample(DiagGaussian(np.zeros(3), np.ones(3)), np.zeros(2))

    def test_gradient_flows_to_parameters(self):
        m, s = nd.parameter([1.0]), nd.parameter([2.0])
        gm, gs = nd.backward(reparam_sample(DiagGaussian(m, s), [0.5]).sum(), [m, s])
        assert (gm[0], gs[0]) == (1.0, 0.5)


class TestKl:
    def test_known_value(self):
        # KL(N(1, 4) || N(0, 1)) = (4 + 1 - 1 - log 4) / 2
        assert kl_diag(DiagGaussian([1.0], [2.0]), DiagGaussian([0.0], [1.0])) == pytest.approx(1.3068528194400546)

    @given(st.integers(0, 10_000))
    def test_non_negative_and_zero_on_self(self, seed):
        rng = np.random.default_rng(seed)
        q = DiagGaussian(rng.standard_normal(3), rng.uniform(0.1, 2, 3))
        p = DiagGaussian(rng.standard_normal(3), rng.uniform(0.1, 2, 3))
        assert kl_diag(q, p) >= 0
        assert kl_diag(q, q) == pytest.approx(0.0, abs=1e-12)

    def test_sums_over_coordinates(self):
        q = DiagGaussian([1.0, 0.0], [2.0, 1.0])
        p = DiagGaussian([0.0, 0.0], [1.0, 1.0])
        assert kl_diag(q, p) == pytest.approx(1.3068528194400546)


class TestLogMeanExp:
    def test_matches_naive(self):
        v = np.array([[0.1, -2.0, 3.0], [1.0, 1.0, 1.0]])
        np.testing.assert_allclose(log_mean_exp(v).data, np.log(np.exp(v).mean(axis=1)))

    def test_large_values(self):
        assert log_mean_exp(np.array([800.0, 800.0])).data == pytest.approx(800.0)

    def test_empty(self):
        with pytest.raises(ContractError):
            log_mean_exp(np.zeros((2, 0)))
