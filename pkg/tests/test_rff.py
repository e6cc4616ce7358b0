import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tradi.errors import ContractError
from tradi.rff import RFFProjection, build_factor, feature_map, rbf_kernel, rff_init
from tradi.verify import rff_kernel_errors


def fixed(theta, phi, sigma_rbf=1.0):
    return RFFProjection(np.array(theta, float), np.array(phi, float), sigma_rbf)


class TestInit:
    def test_defaults(self):
        p = rff_init(seed=0)
        assert p.N == 10 and p.sigma_rbf == 1.0

    def test_same_seed_same_projection(self):
        a, b = rff_init(10, 1.0, 42), rff_init(10, 1.0, 42)
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.phi, b.phi)

    def test_frozen(self):
        p = rff_init(4, 1.0, 0)
        with pytest.raises(ValueError):
            p.theta[0] = 1.0

    def test_theta_centered(self):
        N = 100_000
        p = rff_init(N, 1.0, 1)
        assert abs(p.theta.mean()) < 4 / np.sqrt(N)
        assert p.phi.min() >= 0 and p.phi.max() <= 2 * np.pi

    def test_theta_scale(self):
        assert rff_init(100_000, 2.5, 3).theta.std() == pytest.approx(2.5, rel=0.02)

    @pytest.mark.parametrize("N,s", [(0, 1.0), (5, 0.0), (5, -1.0)])
    def test_invalid(self, N, s):
        with pytest.raises(ContractError):
            rff_init(N, s)


class TestFeatureMap:
    @pytest.mark.parametrize("w", [-3.0, 0.0, 7.5])
    def test_constant_feature(self, w):
        assert feature_map(fixed([0.0], [0.0]), w) == pytest.approx([np.sqrt(2)])

    def test_hand_two_features(self):
        assert np.allclose(feature_map(fixed([1.0, 1.0], [0.0, np.pi / 2]), 0.0), [1.0, 0.0], atol=1e-15)

    @settings(max_examples=50)
    @given(st.floats(-1e3, 1e3), st.integers(1, 50))
    def test_bounded(self, w, N):
        z = feature_map(rff_init(N, 1.0, 0), w)
        assert np.all(np.abs(z) <= np.sqrt(2 / N) + 1e-15)

    def test_vector_input(self):
        p = rff_init(6, 1.0, 0)
        Z = feature_map(p, np.array([0.1, 0.2, 0.3]))
        assert Z.shape == (3, 6) and np.allclose(Z[1], feature_map(p, 0.2))

    def test_kernel_expectation(self):
        # 1e5 independent single-feature projections
        p = rff_init(100_000, 1.0, 11)
        est = feature_map(p, 0.0) @ feature_map(p, 1.0)
        assert abs(est - np.exp(-0.5)) < 0.01

    def test_kernel_error_decreases_with_N(self):
        errs = rff_kernel_errors()
        assert errs[-1] < 0.05
        assert all(b <= a for a, b in zip(errs, errs[1:]))


class TestFactor:
    def test_rows(self, rng):
        p = rff_init(8, 1.0, 0)
        w, s = rng.standard_normal(5), rng.uniform(0.1, 1, 5)
        R = build_factor(p, w, s)
        for k in range(5):
            assert np.allclose(R[k], s[k] * feature_map(p, w[k]))
            assert np.linalg.norm(R[k]) <= s[k] * np.sqrt(2) + 1e-12
        assert np.allclose(np.diag(R @ R.T), s ** 2 * np.sum(feature_map(p, w) ** 2, axis=1))

    def test_zero_std_rejected_by_default(self):
        with pytest.raises(ContractError):
            build_factor(rff_init(3, 1, 0), np.zeros(2), np.array([1.0, 0.0]))

    def test_zero_std_row_when_allowed(self):
        R = build_factor(rff_init(3, 1, 0), np.zeros(2), np.array([1.0, 0.0]), allow_zero=True)
        assert not R[1].any()

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            build_factor(rff_init(3, 1, 0), np.zeros(2), np.ones(3))

    def test_equal_weights(self):
        p = rff_init(10, 1.0, 1)
        s = np.array([0.5, 2.0])
        R = build_factor(p, np.array([0.7, 0.7]), s)
        z = feature_map(p, 0.7)
        assert (R @ R.T)[0, 1] == pytest.approx(s[0] * s[1] * z @ z, rel=1e-14)

    def test_hadamard_oracle(self, rng):
        p = rff_init(10, 1.0, 2)
        w, s = rng.normal(0, 0.5, 20), rng.uniform(0.05, 0.5, 20)
        R = build_factor(p, w, s)
        Z = np.array([[feature_map(p, a) @ feature_map(p, b) for b in w] for a in w])
        dense = np.outer(s, s) * Z
        assert np.max(np.abs(R @ R.T - dense)) <= 1e-12

    def test_low_rank_covariance_is_psd(self, rng):
        R = build_factor(rff_init(10, 1.0, 3), rng.standard_normal(30), rng.uniform(0.1, 1, 30))
        eig = np.linalg.eigvalsh(R @ R.T)
        assert eig.min() > -1e-12 and np.sum(eig > 1e-10) <= 10


def test_rbf_kernel_closed_form():
    assert rbf_kernel(0.0, 1.0) == pytest.approx(np.exp(-0.5))
    assert rbf_kernel(0.0, 2.0, sigma_rbf=2.0) == pytest.approx(np.exp(-0.5))
