"""MAC / BOP accounting and the per-gate regularization weights derived from it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .quantizer import ConfigError

VALID_BITS = (0, 2, 4, 8, 16, 32)
FULL_PRECISION = 32


@dataclass(frozen=True)
class LayerCost:
    """Static description of one weight layer for cost purposes.

    ``producers`` names the layers whose pruned output channels form this
    layer's input channels.  Input-pruning credit is only taken when there is
    exactly one producer; anything else (network input, residual merges) is
    counted as unpruned, so totals are an upper bound there.
    """

    name: str
    kind: str  # "conv" | "fc"
    c_in: int
    c_out: int
    out_h: int = 1
    out_w: int = 1
    k_h: int = 1
    k_w: int = 1
    weight_quantizer: Optional[str] = None
    input_quantizer: Optional[str] = None
    producers: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ConfigError(f"{self.name}: unknown layer kind {self.kind!r}")
        if min(self.c_in, self.c_out, self.out_h, self.out_w, self.k_h, self.k_w) < 1:
            raise ConfigError(f"{self.name}: all extents must be positive")


def mac_count(layer: LayerCost) -> int:
    if layer.kind == "fc":
        return layer.c_in * layer.c_out
    return layer.c_out * layer.out_w * layer.out_h * layer.c_in * layer.k_w * layer.k_h


def bop_count(layer: LayerCost, b_w: int, b_a: int, p_i: float = 1.0, p_o: float = 1.0) -> float:
    """p_i * p_o * MACs * b_w * b_a (accumulator additions are not counted)."""
    for b in (b_w, b_a):
        if b not in VALID_BITS:
            raise ConfigError(f"bit width {b} not in {VALID_BITS}")
    for p in (p_i, p_o):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"pruning ratio {p} outside [0, 1]")
    return p_i * p_o * mac_count(layer) * b_w * b_a


@dataclass
class NetworkCost:
    layers: List[LayerCost] = field(default_factory=list)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate layer names in cost model")
        for l in self.layers:
            for p in l.producers:
                if p not in names:
                    raise ConfigError(f"{l.name}: unknown producer {p!r}")

    def layer(self, name: str) -> LayerCost:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def quantizer_ids(self) -> List[str]:
        seen = []
        for l in self.layers:
            for q in (l.input_quantizer, l.weight_quantizer):
                if q is not None and q not in seen:
                    seen.append(q)
        return seen

    def consumers(self, qid: str) -> List[LayerCost]:
        """Layers whose operand (weight or input activation) is quantizer ``qid``."""
        return [l for l in self.layers if qid in (l.weight_quantizer, l.input_quantizer)]

    def max_macs(self) -> int:
        return max(mac_count(l) for l in self.layers)

    def total_macs(self) -> int:
        return sum(mac_count(l) for l in self.layers)


def lambda_prime(bits: int, qid: str, net: NetworkCost) -> float:
    """b_j * (sum of MACs over the layers ``qid`` feeds) / max layer MACs."""
    layers = net.consumers(qid)
    if not layers:
        raise ConfigError(f"quantizer {qid!r} is not attached to any layer")
    return bits * sum(mac_count(l) for l in layers) / net.max_macs()


@dataclass
class BopsResult:
    absolute: float
    relative: float  # percent of the all-32/32, unpruned network
    per_layer: Dict[str, dict]


def network_bops(
    net: NetworkCost,
    bits: Mapping[str, int],
    keep: Optional[Mapping[str, float]] = None,
) -> BopsResult:
    """Total BOPs given each quantizer's effective bit width and kept-channel ratio.

    Layers without a weight (or input) quantizer run at 32 bits on that operand.
    """
    keep = keep or {}
    per_layer = {}
    total = 0.0
    for l in net.layers:
        b_w = bits[l.weight_quantizer] if l.weight_quantizer else FULL_PRECISION
        b_a = bits[l.input_quantizer] if l.input_quantizer else FULL_PRECISION
        p_o = keep.get(l.weight_quantizer, 1.0) if l.weight_quantizer else 1.0
        p_i = 1.0
        if len(l.producers) == 1:
            prod = net.layer(l.producers[0])
            if prod.weight_quantizer:
                p_i = keep.get(prod.weight_quantizer, 1.0)
        bops = bop_count(l, b_w, b_a, p_i, p_o)
        macs = mac_count(l)
        per_layer[l.name] = {"macs": macs, "bops": bops, "b_w": b_w, "b_a": b_a, "p_i": p_i, "p_o": p_o}
        total += bops
    full = net.total_macs() * FULL_PRECISION * FULL_PRECISION
    return BopsResult(total, 100.0 * total / full, per_layer)


def nonpower_bins(a: int, b: int) -> Tuple[int, int]:
    """Bin count N when refining an a-bit grid to b bits, and N - (2**b - 1)."""
    if not 0 < a < b:
        raise ValueError(f"need 0 < a < b, got a={a}, b={b}")
    n = 2 ** b + 2 ** a - 2 ** (b - a) - 1
    return n, n - (2 ** b - 1)


def relative_bops_uniform(net: NetworkCost, b_w: int, b_a: int) -> float:
    """Relative BOPs when every weight is b_w bits and every activation b_a bits."""
    bits = {}
    for l in net.layers:
        if l.weight_quantizer:
            bits[l.weight_quantizer] = b_w
        if l.input_quantizer:
            bits[l.input_quantizer] = b_a
    return network_bops(net, bits).relative


def lambda_table(net: NetworkCost, ladders: Mapping[str, Sequence[int]]) -> Dict[str, Dict[int, float]]:
    return {qid: {b: lambda_prime(b, qid, net) for b in ladder} for qid, ladder in ladders.items()}
