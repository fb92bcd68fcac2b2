import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesbits import autodiff as ad
from bayesbits.gates import open_probability
from bayesbits.objective import (
    entropy_bound_holds,
    exact_elbo_kl,
    expected_chain_length,
    gate_regularizer,
    kl_approximation_gap,
    l0_identity_check,
    quantizer_penalty,
    regularizer_value,
    total_loss,
)
from bayesbits.quantizer import ConfigError, Quantizer

from oracles import chain_kl_enumerated, numeric_grad


def small_quantizer(phis, lambdas, **kw):
    q = Quantizer("q", signed=False, ladder=(2, 4, 8), **kw)
    for b, v in zip((2, 4, 8), phis):
        q.phi[b].data = np.full(q.phi[b].shape, float(v))
    q.lambdas = dict(zip((2, 4, 8), lambdas))
    return q


class TestPenalty:
    def test_unit_lambda_hand_expansion(self):
        assert expected_chain_length([1.0, 0.5, 0.0]) == 1.5

    def test_nested_product(self):
        q = small_quantizer([0.3, -0.7, 1.2], [2.0, 3.0, 5.0])
        p = [open_probability(v) for v in (0.3, -0.7, 1.2)]
        expected = 2 * p[0] + 3 * p[0] * p[1] + 5 * p[0] * p[1] * p[2]
        assert float(quantizer_penalty(q).data) == pytest.approx(expected, rel=1e-14)

    def test_per_channel_uses_mean(self):
        q = Quantizer("w", signed=True, ladder=(2, 4), prune_axis=0, channels=2)
        q.phi[2].data = np.array([0.5, -1.0])
        q.phi[4].data = np.array(0.2)
        q.lambdas = {2: 4.0, 4: 8.0}
        m = np.mean([open_probability(0.5), open_probability(-1.0)])
        expected = 4 * m + 8 * m * open_probability(0.2)
        assert float(quantizer_penalty(q).data) == pytest.approx(expected, rel=1e-14)

    def test_activation_two_bit_term_is_constant(self):
        q = Quantizer("a", signed=False, ladder=(2, 4), gate_zero_bit=False)
        q.phi[4].data = np.array(0.0)
        q.lambdas = {2: 1.0, 4: 1.0}
        assert float(quantizer_penalty(q).data) == pytest.approx(1 + open_probability(0.0))

    def test_mu_scales_and_validates(self):
        q = small_quantizer([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        assert regularizer_value([q], 0.1) == pytest.approx(0.1 * float(quantizer_penalty(q).data))
        with pytest.raises(ConfigError):
            gate_regularizer([q], -1.0)

    def test_missing_lambdas(self):
        q = Quantizer("q", signed=False)
        with pytest.raises(ConfigError):
            quantizer_penalty(q)

    def test_disabled_quantizer_not_penalized(self):
        q = small_quantizer([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        q.enabled = False
        assert regularizer_value([q], 1.0) == 0.0


class TestLossGradient:
    def test_phi_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, size=(6, 3))
        w = rng.normal(size=(3, 4))
        y = np.array([0, 1, 2, 3, 0, 1])
        phis = [0.4, -0.2, 0.3]

        def loss_for(phi_vals, track=False):
            q = small_quantizer(phi_vals, [1.0, 2.0, 4.0], phi_init=0.0)
            out = q(x, train=True, rng=np.random.default_rng(7))
            loss, _, _ = total_loss(ad.matmul(out, ad.Tensor(w)), y, [q], mu=0.3)
            return q, loss

        q, loss = loss_for(phis)
        loss.backward()
        analytic = [float(q.phi[b].grad) for b in (2, 4, 8)]
        for i, b in enumerate((2, 4, 8)):
            def f(v, i=i):
                vals = list(phis)
                vals[i] = float(v)
                return float(loss_for(vals)[1].data)
            fd = float(numeric_grad(f, np.array(phis[i])))
            assert analytic[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_mu_zero_has_no_regularizer(self):
        q = small_quantizer([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        loss, ce, reg = total_loss(ad.Tensor(np.zeros((2, 3))), [0, 1], [q], 0.0)
        assert float(reg.data) == 0.0 and float(loss.data) == pytest.approx(math.log(3))


class TestKLApproximation:
    def test_exact_matches_enumeration(self):
        q = [0.8, 0.4, 0.9]
        lam = 0.7
        p = [math.exp(-lam)] * 3
        assert exact_elbo_kl(q, lam) == pytest.approx(chain_kl_enumerated(q, p), rel=1e-12)

    def test_gap_shrinks_with_n(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            q = rng.uniform(0.05, 0.95, size=int(rng.integers(1, 5)))
            lam = float(rng.uniform(0.1, 3.0))
            assert kl_approximation_gap(q, lam, 10 ** 3) >= 10 * kl_approximation_gap(q, lam, 10 ** 6)

    def test_entropy_bound(self):
        assert entropy_bound_holds([0.5, 0.1, 0.99], 1000)


class TestL0Identity:
    def test_hand_example(self):
        lhs, rhs = l0_identity_check([0.5, 0.5, 0.5])
        assert lhs == 0.875 and rhs == pytest.approx(0.875, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=5))
    def test_random_chains(self, probs):
        lhs, rhs = l0_identity_check(probs)
        assert abs(lhs - rhs) <= 1e-12

    def test_too_long(self):
        with pytest.raises(ValueError):
            l0_identity_check([0.5] * 6)
