"""Self-checks run by ``bayesbits check``.

Each check compares the library against an independent computation: direct
uniform quantization, central finite differences, or brute-force enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import autodiff as ad
from .arch import build_cost_model, parse_arch
from .cost import nonpower_bins, relative_bops_uniform
from .gates import sample_gate
from .objective import kl_approximation_gap, l0_identity_check
from .quantizer import BETA_SHRINK, LADDER, Quantizer, pact_clip, quantize, step_sizes


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.suite}/{self.name} {self.detail}".rstrip()


def _clip(x: np.ndarray, beta: float, signed: bool) -> np.ndarray:
    hi = beta * BETA_SHRINK
    return np.clip(x, -hi if signed else 0.0, hi)


def decomposition_suite(seed: int = 0, n: int = 2000) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for bits in LADDER:
        worst = 0.0
        for signed in (False, True):
            beta = float(rng.uniform(0.1, 10.0))
            q = Quantizer("check", signed=signed, beta=beta)
            q.force_bits(bits)
            x = rng.uniform(-1.5 * beta, 1.5 * beta, size=n)
            span = 2 * beta if signed else beta
            s = span / (2 ** bits - 1)
            direct = s * np.rint(_clip(x, beta, signed) / s)
            got = quantize(x, q).data
            worst = max(worst, float(np.max(np.abs(got - direct))))
        out.append(CheckResult("decomposition", f"b{bits}", worst <= 1e-9, f"max_abs_err={worst:.3g}"))

    beta = 1.0
    x = rng.uniform(0.0, beta, size=n)
    s = step_sizes(beta)
    x2 = s[2] * np.rint(x / s[2])
    codes = np.rint((x - x2) / s[4])
    found = sorted(int(c) for c in np.unique(codes))
    out.append(CheckResult("decomposition", "residual_codes", set(found) <= {-2, -1, 0, 1, 2}, f"codes={found}"))
    return out


def _fd_check(fn: Callable, shapes, rng, h: float = 1e-5, positive: bool = False) -> float:
    xs = [rng.uniform(0.5, 2.0, size=s) if positive else rng.normal(size=s) for s in shapes]
    ts = [ad.Tensor(x.copy(), requires_grad=True) for x in xs]
    w = rng.normal(size=np.shape(fn(*[ad.Tensor(x) for x in xs]).data))
    out = ad.sum(ad.mul(fn(*ts), ad.Tensor(w)))
    out.backward()
    worst = 0.0
    for t, x in zip(ts, xs):
        num = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            args_p = [ad.Tensor(xp if u is x else u) for u in xs]
            args_m = [ad.Tensor(xm if u is x else u) for u in xs]
            num[i] = (np.sum(fn(*args_p).data * w) - np.sum(fn(*args_m).data * w)) / (2 * h)
        err = np.abs(t.grad - num) / np.maximum(np.abs(num), 1e-2)
        worst = max(worst, float(err.max()))
    return worst


def gradient_ops() -> dict:
    """name -> (fn, input shapes, positive inputs)."""
    return {
        "add": (ad.add, [(3, 4), (3, 4)], False),
        "sub": (ad.sub, [(3, 4), (3, 4)], False),
        "mul": (ad.mul, [(3, 4), (3, 4)], False),
        "div": (ad.div, [(3, 4), (3, 4)], True),
        "relu": (ad.relu, [(6,)], False),
        "minimum": (lambda x: ad.minimum(x, 0.3), [(6,)], False),
        "maximum": (lambda x: ad.maximum(x, -0.3), [(6,)], False),
        "sigmoid": (ad.sigmoid, [(5,)], False),
        "log": (ad.log, [(5,)], True),
        "exp": (ad.exp, [(5,)], False),
        "sum": (ad.sum, [(3, 4)], False),
        "mean": (ad.mean, [(3, 4)], False),
        "flatten": (ad.flatten, [(2, 3, 2)], False),
        "reshape": (lambda x: ad.reshape(x, (4, 3)), [(3, 4)], False),
        "matmul": (ad.matmul, [(3, 4), (4, 2)], False),
        "add_channel": (ad.add_channel, [(2, 3, 4, 4), (3,)], False),
        "scale_channels": (lambda x, z: ad.scale_channels(x, z, 1), [(2, 3, 4), (3,)], False),
        "conv2d": (lambda x, w: ad.conv2d(x, w, 1, 1), [(2, 2, 5, 5), (3, 2, 3, 3)], False),
        "conv2d_stride2": (lambda x, w: ad.conv2d(x, w, 2, 0), [(1, 2, 6, 6), (2, 2, 3, 3)], False),
        "max_pool2d": (lambda x: ad.max_pool2d(x, 2), [(2, 2, 4, 4)], False),
        "pact_clip_signed": (lambda x, b: pact_clip(x, ad.sum(b), True), [(6,), (1,)], True),
        "pact_clip_unsigned": (lambda x, b: pact_clip(ad.mul(x, 3.0), ad.sum(b), False), [(6,), (1,)], True),
        "sample_gate": (lambda phi: sample_gate(phi, np.linspace(0.1, 0.9, 5)), [(5,)], False),
        "cross_entropy": (lambda z: ad.softmax_cross_entropy(z, np.array([0, 2, 1])), [(3, 4)], False),
    }


def gradient_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, shapes, positive) in gradient_ops().items():
        err = _fd_check(fn, shapes, rng, positive=positive)
        out.append(CheckResult("gradient", name, err < 1e-4, f"rel_err={err:.3g}"))
    x = ad.Tensor(rng.normal(size=7) * 3, requires_grad=True)
    g = rng.normal(size=7)
    ad.round_ste(x).backward(g)
    out.append(CheckResult("gradient", "round_ste_identity", bool(np.array_equal(x.grad, g))))
    return out


def identity_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    worst = 0.0
    for _ in range(100):
        probs = rng.uniform(size=int(rng.integers(1, 6)))
        lhs, rhs = l0_identity_check(probs)
        worst = max(worst, abs(lhs - rhs))
    out.append(CheckResult("identity", "l0_chain", worst <= 1e-12, f"max_abs_err={worst:.3g}"))

    bad = [(a, b) for a in range(2, 9) for b in range(a + 1, 9)
           if nonpower_bins(a, b)[0] != (2 ** a - 1) * (2 ** (b - a) + 1)]
    out.append(CheckResult("identity", "nonpower_bins", not bad and nonpower_bins(2, 4)[0] == 15))

    ratios = []
    for _ in range(20):
        q = rng.uniform(0.05, 0.95, size=int(rng.integers(1, 5)))
        lam = float(rng.uniform(0.1, 2.0))
        small, large = kl_approximation_gap(q, lam, 10 ** 3), kl_approximation_gap(q, lam, 10 ** 6)
        ratios.append(small / large if large > 0 else np.inf)
    out.append(CheckResult("identity", "kl_gap_shrinks", min(ratios) >= 10, f"min_ratio={min(ratios):.3g}"))

    net = build_cost_model(parse_arch({"input_shape": [1, 28, 28], "num_classes": 10,
                                       "layers": "32C5-MP2-64C5-MP2-512FC-Softmax"}))
    r8, r4 = relative_bops_uniform(net, 8, 8), relative_bops_uniform(net, 4, 4)
    out.append(CheckResult("identity", "bops_uniform", r8 == 6.25 and r4 == 1.5625, f"8/8={r8} 4/4={r4}"))
    return out


SUITES = {"decomposition": decomposition_suite, "gradient": gradient_suite, "identity": identity_suite}


def run_all(seed: int = 0) -> List[CheckResult]:
    results = []
    for fn in SUITES.values():
        results.extend(fn(seed))
    return results
