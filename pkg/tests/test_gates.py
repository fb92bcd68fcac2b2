import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesbits import autodiff as ad
from bayesbits.gates import (
    HardConcrete,
    bernoulli_entropy,
    chain_kl,
    kl_bernoulli,
    open_probability,
    sample_gate,
    test_time_gate,
    zero_probability,
)

from oracles import chain_kl_enumerated, numeric_grad


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


class TestSampling:
    def test_hand_value(self):
        # s = 0.5, stretched to 0.5 * 1.2 - 0.1
        assert sample_gate(0.0, 0.5) == pytest.approx(0.5, abs=1e-15)

    def test_clamps_to_exact_zero_and_one(self):
        z = sample_gate(np.zeros(2), np.array([1e-6, 1 - 1e-6]))
        np.testing.assert_array_equal(z, [0.0, 1.0])

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.1, 1.5])
    def test_rejects_u_outside_open_interval(self, u):
        with pytest.raises(ValueError):
            sample_gate(0.0, u)

    def test_tensor_and_numpy_paths_agree(self):
        rng = np.random.default_rng(0)
        phi, u = rng.normal(size=20) * 3, rng.uniform(0.01, 0.99, size=20)
        np.testing.assert_allclose(sample_gate(ad.Tensor(phi), u).data, sample_gate(phi, u), atol=1e-15)

    def test_gradient_wrt_phi(self):
        u = np.array([0.2, 0.4, 0.6, 0.8])
        phi = np.array([-0.3, 0.1, 0.2, -0.1])
        t = ad.Tensor(phi, requires_grad=True)
        ad.sum(sample_gate(t, u)).backward()
        fd = numeric_grad(lambda p: float(np.sum(sample_gate(p, u))), phi)
        np.testing.assert_allclose(t.grad, fd, rtol=1e-6)

    def test_clamped_gate_has_zero_gradient(self):
        t = ad.Tensor(np.array([20.0]), requires_grad=True)
        ad.sum(sample_gate(t, np.array([0.5]))).backward()
        assert t.grad[0] == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-20, 20), st.floats(1e-9, 1 - 1e-9))
    def test_sample_in_unit_interval(self, phi, u):
        assert 0.0 <= sample_gate(phi, u) <= 1.0


class TestProbabilities:
    def test_open_probability_at_zero(self):
        expected = sigmoid((2 / 3) * math.log(1.1 / 0.1))
        assert open_probability(0.0) == pytest.approx(expected, abs=1e-15)
        assert (2 / 3) * math.log(1.1 / 0.1) == pytest.approx(1.59860, abs=1e-5)
        assert open_probability(0.0) == pytest.approx(0.831822, abs=1e-6)

    def test_monte_carlo_agrees(self):
        rng = np.random.default_rng(1)
        n = 200_000
        for phi in (-1.0, 0.0, 2.0):
            hits = np.mean(sample_gate(np.full(n, phi), rng.uniform(size=n)) > 0)
            p = open_probability(phi)
            assert abs(hits - p) < 4 * math.sqrt(p * (1 - p) / n)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 30))
    def test_open_plus_zero_is_one(self, phi):
        assert open_probability(phi) + zero_probability(phi) == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-10, 10), st.floats(0.01, 5))
    def test_monotone_in_phi(self, phi, step):
        assert open_probability(phi + step) >= open_probability(phi)


class TestTestTimeGate:
    def test_default_phi_zero_is_open(self):
        assert zero_probability(0.0) == pytest.approx(0.168178, abs=1e-6)
        assert test_time_gate(0.0) == 1.0

    def test_boundary_closes(self):
        hc = HardConcrete(threshold=zero_probability(0.0))
        assert test_time_gate(0.0, hc) == 0.0

    def test_vectorized(self):
        np.testing.assert_array_equal(test_time_gate(np.array([-5.0, 5.0])), [0.0, 1.0])

    @pytest.mark.parametrize("kw", [{"tau": 0.0}, {"gamma": 0.1}, {"zeta": 0.9}, {"threshold": 1.0}])
    def test_invalid_shape(self, kw):
        with pytest.raises(ValueError):
            HardConcrete(**kw)


class TestKL:
    def test_bernoulli_hand_value(self):
        p = math.exp(-1.0)
        expected = 0.9 * math.log(0.9 / p) + 0.1 * math.log(0.1 / (1 - p))
        assert kl_bernoulli(0.9, p) == pytest.approx(expected, rel=1e-14)
        # two-point distributions summed directly
        two_point = sum(a * math.log(a / b) for a, b in ((0.9, p), (0.1, 1 - p)))
        assert kl_bernoulli(0.9, p) == pytest.approx(two_point, rel=1e-14)

    def test_bernoulli_endpoints(self):
        assert kl_bernoulli(1.0, 0.9) == pytest.approx(-math.log(0.9))
        assert kl_bernoulli(0.0, 0.5) == pytest.approx(math.log(2))

    def test_chain_two_gates(self):
        expected = kl_bernoulli(1.0, 0.9) + 1.0 * kl_bernoulli(0.5, 0.9)
        assert chain_kl([1.0, 0.5], [0.9, 0.9]) == pytest.approx(expected, rel=1e-14)

    def test_chain_matches_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            k = int(rng.integers(1, 5))
            q, p = rng.uniform(0.02, 0.98, size=k), rng.uniform(0.02, 0.98, size=k)
            assert chain_kl(q, p) == pytest.approx(chain_kl_enumerated(q, p), rel=1e-10, abs=1e-13)

    def test_log_prior_does_not_underflow(self):
        # success probability exp(-1e6) is 0.0 in floating point
        val = chain_kl([0.5], log_p=[-1e6])
        # 0.5 log(0.5 / p) + 0.5 log(0.5 / (1 - p)) with log p = -1e6 and 1 - p = 1
        assert val == pytest.approx(0.5 * 1e6 + math.log(0.5), rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.001, 0.999), st.floats(0.001, 0.999)), min_size=1, max_size=5))
    def test_chain_kl_nonnegative(self, pairs):
        q, p = zip(*pairs)
        assert chain_kl(q, p) >= -1e-12

    def test_entropy_bounded_by_log2(self):
        qs = np.linspace(0, 1, 101)
        assert max(bernoulli_entropy(q) for q in qs) == pytest.approx(math.log(2))
