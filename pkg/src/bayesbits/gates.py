"""Hard-concrete binary gates and the Bernoulli KL terms built on them.

The gate location ``phi`` lives with whoever owns the gate (usually a
quantizer); the shape hyperparameters are shared in :class:`HardConcrete`.
Functions accept floats/ndarrays, and the differentiable ones also accept
:class:`~bayesbits.autodiff.Tensor`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _sigmoid_np


@dataclass(frozen=True)
class HardConcrete:
    """Shape of the stretched, clamped concrete distribution.

    ``threshold`` is the test-time cut-off on the probability of an exact zero.
    """

    tau: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1
    threshold: float = 0.34

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not (self.gamma < 0 and self.zeta > 1):
            raise ValueError(f"need gamma < 0 < 1 < zeta, got gamma={self.gamma}, zeta={self.zeta}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def shift(self) -> float:
        """tau * log(-gamma / zeta); negative for the usual stretch."""
        return self.tau * math.log(-self.gamma / self.zeta)


DEFAULT_HC = HardConcrete()


def sample_gate(phi, u, hc: HardConcrete = DEFAULT_HC):
    """Reparametrized hard-concrete sample.

    ``u`` holds uniform draws in the open interval (0, 1), one per gate.  With a
    Tensor ``phi`` the result is a Tensor differentiable w.r.t. ``phi`` (zero
    gradient where the clamp is active).
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("uniform draw must lie strictly inside (0, 1)")
    g = np.log(u) - np.log1p(-u)
    if isinstance(phi, Tensor):
        s = ad.sigmoid(ad.mul(ad.add(phi, Tensor(g)), 1.0 / hc.tau))
        stretched = ad.add(ad.mul(s, hc.zeta - hc.gamma), hc.gamma)
        return ad.minimum(ad.maximum(stretched, 0.0), 1.0)
    s = _sigmoid_np((g + np.asarray(phi, dtype=np.float64)) / hc.tau)
    return np.clip(s * (hc.zeta - hc.gamma) + hc.gamma, 0.0, 1.0)


def open_probability(phi, hc: HardConcrete = DEFAULT_HC):
    """P(z > 0) = sigmoid(phi - tau*log(-gamma/zeta))."""
    if isinstance(phi, Tensor):
        return ad.sigmoid(ad.add(phi, -hc.shift))
    out = _sigmoid_np(np.asarray(phi, dtype=np.float64) - hc.shift)
    return out if out.ndim else float(out)


def zero_probability(phi, hc: HardConcrete = DEFAULT_HC):
    """P(z == 0) = 1 - P(z > 0), computed without cancellation."""
    out = _sigmoid_np(hc.shift - np.asarray(phi, dtype=np.float64))
    return out if out.ndim else float(out)


def test_time_gate(phi, hc: HardConcrete = DEFAULT_HC):
    """Deterministic gate: 1 iff P(z == 0) is strictly below the threshold."""
    out = (np.asarray(zero_probability(phi, hc)) < hc.threshold).astype(np.float64)
    return out if out.ndim else float(out)


test_time_gate.__test__ = False  # not a pytest test despite the name


def _xlogy(x: float, y: float) -> float:
    if x == 0.0:
        return 0.0
    if y == 0.0:
        return -math.inf
    return x * math.log(y)


def kl_bernoulli(q: float, p: float) -> float:
    """KL(Bern(q) || Bern(p)) with 0*log 0 = 0; +inf when q puts mass where p has none."""
    return kl_bernoulli_log(q, _safe_log(p), _safe_log(1.0 - p))


def _safe_log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def kl_bernoulli_log(q: float, log_p: float, log_1mp: float) -> float:
    """KL(Bern(q) || Bern(p)) given log p and log(1-p).

    Working in log space keeps the term finite for priors like exp(-1e6).
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be a probability, got {q}")
    total = 0.0
    for mass, log_prior in ((q, log_p), (1.0 - q, log_1mp)):
        if mass == 0.0:
            continue
        if log_prior == -math.inf:
            return math.inf
        total += _xlogy(mass, mass) - mass * log_prior
    return max(total, 0.0)


def chain_kl(q: Sequence[float], p: Sequence[float] = None, *, log_p: Sequence[float] = None) -> float:
    """KL between two autoregressive gate chains, lowest bit width first.

    Term i is KL(q_i || p_i) weighted by prod_{j<i} q_j: a gate only matters
    when every lower gate is on.  Pass either success probabilities ``p`` or
    their logs ``log_p``.
    """
    if (p is None) == (log_p is None):
        raise ValueError("pass exactly one of p or log_p")
    if log_p is None:
        log_p = [_safe_log(v) for v in p]
    if len(q) != len(log_p):
        raise ValueError(f"chain lengths differ: {len(q)} vs {len(log_p)}")
    total, weight = 0.0, 1.0
    for qi, lp in zip(q, log_p):
        if weight == 0.0:
            break
        log_1mp = math.log(-math.expm1(lp)) if lp < 0 else -math.inf
        total += weight * kl_bernoulli_log(qi, lp, log_1mp)
        weight *= qi
    return total


def bernoulli_entropy(q: float) -> float:
    return -(_xlogy(q, q) + _xlogy(1.0 - q, 1.0 - q))
