"""Gated residual-doubling quantizer with learnable range and optional channel pruning.

A tensor clipped to [alpha, beta] is first quantized on a 2-bit grid.  Each
further ladder rung b quantizes what is left over on a grid whose step is the
previous step divided by (2**(b/2) + 1), which makes the running sum equal to
a plain b-bit uniform quantizer.  A gate in front of every rung decides
whether that residual (and everything above it) is added; the 2-bit gate
zeroes the whole tensor, or a single output channel when pruning is enabled.
"""

from __future__ import annotations

from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import gates as G
from .autodiff import Tensor

LADDER = (2, 4, 8, 16, 32)
BETA_SHRINK = 1.0 - 1e-7


class ConfigError(ValueError):
    """Invalid quantizer or regularizer configuration."""


def _check_ladder(ladder: Sequence[int]) -> Tuple[int, ...]:
    ladder = tuple(int(b) for b in ladder)
    if not ladder or ladder[0] != 2:
        raise ConfigError(f"ladder must start at 2 bits, got {ladder}")
    for lo, hi in zip(ladder, ladder[1:]):
        if hi != 2 * lo:
            raise ConfigError(f"ladder entries must double, got {lo} -> {hi}")
    return ladder


class Quantizer:
    """Per-tensor quantizer state: range ``beta``, gate logits ``phi`` and λ′ weights.

    ``phi[2]`` has shape (C,) when ``prune_axis`` is set and () otherwise; the
    higher gates are always scalars shared across channels.  Activation
    quantizers pass ``gate_zero_bit=False`` so the 2-bit gate is fixed on.
    """

    def __init__(
        self,
        name: str,
        signed: bool,
        ladder: Sequence[int] = LADDER,
        prune_axis: Optional[int] = None,
        channels: Optional[int] = None,
        gate_zero_bit: bool = True,
        beta: float = 1.0,
        phi_init: float = 6.0,
        hc: G.HardConcrete = G.DEFAULT_HC,
    ):
        self.name = name
        self.signed = bool(signed)
        self.ladder = _check_ladder(ladder)
        if prune_axis is not None:
            if not gate_zero_bit:
                raise ConfigError(f"{name}: pruning needs a learnable 2-bit gate")
            if not channels or channels < 1:
                raise ConfigError(f"{name}: prune_axis set but channel count is {channels}")
        self.prune_axis = prune_axis
        self.channels = channels if prune_axis is not None else None
        self.gate_zero_bit = gate_zero_bit
        self.hc = hc
        self.beta = Tensor(float(beta), requires_grad=True)
        self.phi: Dict[int, Tensor] = {}
        for b in self.ladder:
            if b == 2 and not gate_zero_bit:
                continue
            shape = (self.channels,) if (b == 2 and prune_axis is not None) else ()
            self.phi[b] = Tensor(np.full(shape, float(phi_init)), requires_grad=True)
        self.lambdas: Dict[int, float] = {}
        # deterministic gate values overriding sampling/thresholding (finetune, baselines)
        self.frozen: Optional[Dict[int, np.ndarray]] = None
        self.enabled = True

    def __repr__(self) -> str:
        return f"Quantizer({self.name!r}, signed={self.signed}, beta={self.beta.item():.4g}, prune_axis={self.prune_axis})"

    # -------------------------------------------------------------- parameters

    def gate_params(self):
        return [self.phi[b] for b in self.ladder if b in self.phi]

    def range_params(self):
        return [self.beta]

    def alpha_of(self, beta):
        return -beta if self.signed else 0.0

    def step_sizes(self) -> Dict[int, float]:
        """Numeric step size of every rung, built by the doubling recursion."""
        beta = float(self.beta.data)
        if beta <= 0:
            raise ConfigError(f"{self.name}: beta must be positive, got {beta}")
        return step_sizes(beta - (-beta if self.signed else 0.0), self.ladder)

    # ------------------------------------------------------------------- gates

    def _ones(self, b: int) -> np.ndarray:
        return np.ones((self.channels,)) if (b == 2 and self.prune_axis is not None) else np.array(1.0)

    def eval_gates(self) -> Dict[int, np.ndarray]:
        """Thresholded {0,1} gates; frozen values win when present."""
        if self.frozen is not None:
            return {b: np.array(v, dtype=np.float64) for b, v in self.frozen.items()}
        out = {}
        for b in self.ladder:
            out[b] = np.asarray(G.test_time_gate(self.phi[b].data, self.hc)) if b in self.phi else self._ones(b)
        return out

    def sample_gates(self, rng: np.random.Generator) -> Dict[int, Tensor]:
        """One hard-concrete sample per gate (per channel for the pruning gate)."""
        if self.frozen is not None:
            return {b: Tensor(v) for b, v in self.eval_gates().items()}
        out = {}
        for b in self.ladder:
            if b not in self.phi:
                out[b] = Tensor(self._ones(b))
                continue
            phi = self.phi[b]
            u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=phi.shape)
            u = np.where(u >= 1.0, np.nextafter(1.0, 0.0), u)
            out[b] = G.sample_gate(phi, u, self.hc)
        return out

    def gates(self, train: bool, rng: Optional[np.random.Generator] = None) -> Dict[int, Tensor]:
        if train:
            if rng is None:
                raise ValueError("training-mode gates need an rng")
            return self.sample_gates(rng)
        return {b: Tensor(v) for b, v in self.eval_gates().items()}

    def freeze(self) -> None:
        """Fix every gate to its current thresholded value."""
        self.frozen = None
        self.frozen = self.eval_gates()

    def force_bits(self, bits: int) -> None:
        """Fix gates on through ``bits`` and off above (0 prunes everything)."""
        if bits != 0 and bits not in self.ladder:
            raise ConfigError(f"{self.name}: {bits} bits not in ladder {self.ladder}")
        self.frozen = {b: self._ones(b) * float(b <= bits) for b in self.ladder}
        if not self.gate_zero_bit:
            self.frozen[2] = self._ones(2)

    def unfreeze(self) -> None:
        self.frozen = None

    # --------------------------------------------------------------- forward

    def __call__(self, x, train: bool = False, rng=None, gates: Optional[Dict[int, Tensor]] = None) -> Tensor:
        return quantize(x, self, train=train, rng=rng, gates=gates)

    # ------------------------------------------------------------- reporting

    def effective_bitwidth(self) -> Tuple[int, float]:
        """(bit width, fraction of channels kept) under thresholded gates."""
        return effective_bitwidth(self)

    def open_probabilities(self) -> Dict[int, np.ndarray]:
        out = {}
        for b in self.ladder:
            out[b] = np.asarray(G.open_probability(self.phi[b].data, self.hc)) if b in self.phi else self._ones(b)
        return out

    def state_dict(self) -> dict:
        return {
            "name": self.name,
            "signed": self.signed,
            "ladder": list(self.ladder),
            "prune_axis": self.prune_axis,
            "channels": self.channels,
            "gate_zero_bit": self.gate_zero_bit,
            "beta": float(self.beta.data),
            "phi": {str(b): self.phi[b].data.tolist() for b in self.phi},
            "lambdas": {str(b): v for b, v in self.lambdas.items()},
            "frozen": None if self.frozen is None else {str(b): np.asarray(v).tolist() for b, v in self.frozen.items()},
            "hc": [self.hc.tau, self.hc.gamma, self.hc.zeta, self.hc.threshold],
        }

    @classmethod
    def from_state(cls, st: dict) -> "Quantizer":
        q = cls(
            st["name"], st["signed"], st["ladder"], st["prune_axis"], st["channels"],
            st["gate_zero_bit"], st["beta"], hc=G.HardConcrete(*st["hc"]),
        )
        for b, v in st["phi"].items():
            q.phi[int(b)].data = np.array(v, dtype=np.float64)
        q.lambdas = {int(b): float(v) for b, v in st["lambdas"].items()}
        if st.get("frozen") is not None:
            q.frozen = {int(b): np.array(v, dtype=np.float64) for b, v in st["frozen"].items()}
        return q


def step_sizes(span: float, ladder: Sequence[int] = LADDER) -> Dict[int, float]:
    """s_2 = span/3, then s_b = s_{b/2} / (2**(b/2) + 1)."""
    ladder = _check_ladder(ladder)
    out = {2: span / 3.0}
    for lo, hi in zip(ladder, ladder[1:]):
        out[hi] = out[lo] / (2 ** lo + 1)
    return out


def pact_clip(x, beta, signed: bool) -> Tensor:
    """Clip x to [alpha, beta'] with the two-ReLU form, differentiable in x and beta.

    beta' = (1 - 1e-7) beta keeps the top value off a rounding tie.  For signed
    quantizers the lower bound is mirrored (-beta') for the same reason.
    """
    beta = ad.as_tensor(beta)
    if np.any(beta.data <= 0):
        raise ConfigError(f"beta must be positive, got {beta.data}")
    hi = ad.mul(beta, BETA_SHRINK)
    lo = ad.mul(hi, -1.0) if signed else Tensor(0.0)
    inner = ad.relu(ad.sub(x, lo))
    return ad.sub(hi, ad.relu(ad.sub(ad.sub(hi, lo), inner)))


def quantize(
    x,
    q: Quantizer,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    gates: Optional[Dict[int, Tensor]] = None,
) -> Tensor:
    """Clip, decompose into gated residuals, and sum.

    Residuals are computed from the ungated running sum; gates only decide what
    reaches the output: z2 * (x2 + z4 * (e4 + z8 * (e8 + ...))).
    """
    x = ad.as_tensor(x)
    if not q.enabled:
        return x
    if q.prune_axis is not None and (x.data.ndim <= q.prune_axis or x.shape[q.prune_axis] != q.channels):
        raise ad.ShapeError(f"{q.name}: tensor {x.shape} has no axis {q.prune_axis} with {q.channels} channels")
    if gates is None:
        gates = q.gates(train, rng)

    beta = q.beta
    xc = pact_clip(x, beta, q.signed)
    span = ad.mul(beta, 2.0) if q.signed else beta
    s = ad.mul(span, 1.0 / 3.0)
    running = ad.mul(s, ad.round_ste(ad.div(xc, s)))
    terms = [running]
    for lo, hi in zip(q.ladder, q.ladder[1:]):
        # stop once every later rung is gated off exactly; its residual cannot reach the output
        if _is_zero(gates[hi]):
            break
        s = ad.mul(s, 1.0 / (2 ** lo + 1))
        eps = ad.mul(s, ad.round_ste(ad.div(ad.sub(xc, running), s)))
        running = ad.add(running, eps)
        terms.append(eps)

    # nest from the top rung down
    used = q.ladder[: len(terms)]
    acc = None
    for b, term in zip(reversed(used), reversed(terms)):
        inner = term if acc is None else ad.add(term, acc)
        if b == 2:
            acc = _apply_zero_bit_gate(inner, gates[2], q)
        else:
            acc = ad.mul(gates[b], inner)
    return acc


def _is_zero(z: Tensor) -> bool:
    # an exact zero also zeroes the gradient reaching higher rungs, so skipping is exact
    return z.size == 1 and float(z.data) == 0.0


def _apply_zero_bit_gate(x: Tensor, z2: Tensor, q: Quantizer) -> Tensor:
    if q.prune_axis is not None:
        return ad.scale_channels(x, z2, q.prune_axis)
    return ad.mul(z2, x)


def effective_bitwidth(q: Quantizer) -> Tuple[int, float]:
    g = q.eval_gates()
    z2 = np.asarray(g[2]).reshape(-1)
    ratio = float(z2.mean())
    if ratio == 0.0:
        return 0, 0.0
    bits = 2
    for b in q.ladder[1:]:
        if float(g[b]) != 1.0:
            break
        bits = b
    return bits, ratio


def uniform_quantize(x, alpha: float, beta: float, bits: int) -> np.ndarray:
    """Direct b-bit quantizer s*round(x/s) with s = (beta - alpha)/(2**b - 1)."""
    s = (beta - alpha) / (2 ** bits - 1)
    return s * np.rint(np.asarray(x, dtype=np.float64) / s)
