"""Training loss (cross-entropy + BOP-weighted gate penalty) and checks on its derivation."""

from __future__ import annotations

import itertools
import math
from typing import Iterable, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import gates as G
from .autodiff import Tensor
from .quantizer import ConfigError, Quantizer


def quantizer_penalty(q: Quantizer) -> Tensor:
    """sum_i λ′_i * prod_{j<=i} P(z_j > 0) for one quantizer.

    With a per-channel 2-bit gate the product starts from the mean channel
    open-probability, i.e. each channel carries λ′/C of every term.
    """
    missing = [b for b in q.ladder if b not in q.lambdas]
    if missing:
        raise ConfigError(f"{q.name}: no λ′ for bit widths {missing}")
    total = Tensor(0.0)
    chain = None
    for b in q.ladder:
        if q.frozen is not None:
            p = Tensor(np.mean(q.frozen[b]))
        elif b in q.phi:
            p = G.open_probability(q.phi[b], q.hc)
            if p.size > 1:
                p = ad.mean(p)
        else:
            p = Tensor(1.0)
        chain = p if chain is None else ad.mul(chain, p)
        total = ad.add(total, ad.mul(chain, q.lambdas[b]))
    return total


def gate_regularizer(quantizers: Iterable[Quantizer], mu: float) -> Tensor:
    if mu < 0:
        raise ConfigError(f"mu must be >= 0, got {mu}")
    total = Tensor(0.0)
    for q in quantizers:
        if q.enabled:
            total = ad.add(total, quantizer_penalty(q))
    return ad.mul(total, mu)


def total_loss(logits: Tensor, labels, quantizers: Iterable[Quantizer], mu: float) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (loss, cross-entropy, regularizer)."""
    ce = ad.softmax_cross_entropy(logits, labels)
    if mu == 0:
        reg = Tensor(0.0)
        return ce, ce, reg
    reg = gate_regularizer(quantizers, mu)
    return ad.add(ce, reg), ce, reg


def expected_chain_length(probs: Sequence[float]) -> float:
    """sum_i prod_{j<=i} q_j."""
    total, run = 0.0, 1.0
    for p in probs:
        run *= p
        total += run
    return total


def exact_elbo_kl(q: Sequence[float], lam: float) -> float:
    """Exact chain KL against a prior with success probability exp(-lam) at every rung."""
    return G.chain_kl(q, log_p=[-float(lam)] * len(q))


def kl_approximation_gap(q: Sequence[float], lam_prime: float, n: int) -> float:
    """|exact KL / N - λ′ * sum_i prod_{j<=i} q_j| with the prior scaled as λ = N λ′."""
    return abs(exact_elbo_kl(q, n * lam_prime) / n - lam_prime * expected_chain_length(q))


def l0_identity_check(probs: Sequence[float]) -> Tuple[float, float]:
    """Closed-form expected chain length vs. brute-force expectation over {0,1}^k.

    Configurations are weighted by the autoregressive chain distribution: a
    rung can only be on if the one below it is, so the enumeration weights each
    gate by q_j when its predecessor is on and forces it off otherwise.
    """
    if len(probs) > 5:
        raise ValueError("enumeration limited to 5 gates")
    lhs = expected_chain_length(probs)
    rhs = 0.0
    for cfg in itertools.product((0, 1), repeat=len(probs)):
        w, prev_on = 1.0, True
        for z, p in zip(cfg, probs):
            pz = (p if z else 1.0 - p) if prev_on else (0.0 if z else 1.0)
            w *= pz
            prev_on = bool(z)
        if w == 0.0:
            continue
        on, value = True, 0.0
        for z in cfg:
            on = on and z != 0
            value += float(on)
        rhs += w * value
    return lhs, rhs


def entropy_bound_holds(q: Sequence[float], n: int) -> bool:
    return all(G.bernoulli_entropy(p) / n <= math.log(2) / n + 1e-15 for p in q)


def regularizer_value(quantizers: Iterable[Quantizer], mu: float) -> float:
    return float(np.asarray(gate_regularizer(quantizers, mu).data))
