"""Sequential conv/fc classifiers with a quantizer on every weight and every layer input."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import autodiff as ad
from .arch import ArchSpec, build_cost_model
from .autodiff import Tensor
from .cost import BopsResult, lambda_table, network_bops
from .gates import DEFAULT_HC, HardConcrete
from .quantizer import Quantizer


class Model:
    """Weights, quantizers and cost model for one :class:`ArchSpec`.

    Every conv/fc layer ``L`` owns ``L.w`` (signed, optionally pruned per
    output channel) and ``L.a`` for its input activation (unsigned when it
    follows a ReLU).  Logits are never quantized.
    """

    def __init__(self, arch: ArchSpec, seed: int = 0, phi_init: float = 6.0, hc: HardConcrete = DEFAULT_HC):
        self.arch = arch
        self.cost = build_cost_model(arch)
        rng = np.random.default_rng(seed)
        self.weights: Dict[str, Tensor] = OrderedDict()
        self.biases: Dict[str, Tensor] = OrderedDict()
        self.quantizers: Dict[str, Quantizer] = OrderedDict()
        prev_shape = arch.input_shape
        signed_in = arch.input_signed
        for l, shape in zip(arch.layers, arch.shapes):
            if l.kind == "conv":
                fan_in = prev_shape[0] * l.kernel * l.kernel
                wshape = (l.out, prev_shape[0], l.kernel, l.kernel)
                axis = 0
            elif l.kind == "fc":
                fan_in = int(np.prod(prev_shape))
                wshape = (fan_in, l.out)
                axis = 1
            else:
                prev_shape = shape
                continue
            gain = 2.0 if l.activation == "relu" else 1.0
            w = rng.normal(0.0, np.sqrt(gain / fan_in), size=wshape)
            self.weights[l.name] = Tensor(w, requires_grad=True)
            self.biases[l.name] = Tensor(np.zeros(l.out), requires_grad=True)
            self.quantizers[f"{l.name}.a"] = Quantizer(
                f"{l.name}.a", signed=signed_in, ladder=arch.ladder, gate_zero_bit=False, phi_init=phi_init, hc=hc
            )
            self.quantizers[f"{l.name}.w"] = Quantizer(
                f"{l.name}.w", signed=True, ladder=arch.ladder,
                prune_axis=axis if l.prune else None, channels=l.out if l.prune else None,
                beta=float(np.abs(w).max()), phi_init=phi_init, hc=hc,
            )
            signed_in = l.activation != "relu"
            prev_shape = shape
        lams = lambda_table(self.cost, {k: q.ladder for k, q in self.quantizers.items()})
        for k, q in self.quantizers.items():
            q.lambdas = lams[k]
        self._calib: Optional[Dict[str, List[float]]] = None

    # ------------------------------------------------------------- parameters

    def weight_params(self) -> List[Tensor]:
        out = []
        for name in self.weights:
            out += [self.weights[name], self.biases[name]]
        return out

    def gate_params(self) -> List[Tensor]:
        return [p for q in self.quantizers.values() for p in q.gate_params()]

    def range_params(self) -> List[Tensor]:
        return [q.beta for q in self.quantizers.values()]

    def weight_quantizers(self) -> List[Quantizer]:
        return [q for k, q in self.quantizers.items() if k.endswith(".w")]

    def activation_quantizers(self) -> List[Quantizer]:
        return [q for k, q in self.quantizers.items() if k.endswith(".a")]

    def set_quantization(self, enabled: bool) -> None:
        for q in self.quantizers.values():
            q.enabled = enabled

    def reset_weight_ranges(self) -> None:
        for name, w in self.weights.items():
            self.quantizers[f"{name}.w"].beta.data = np.array(float(np.abs(w.data).max()))

    def freeze_gates(self) -> None:
        for q in self.quantizers.values():
            q.freeze()

    def unfreeze_gates(self) -> None:
        for q in self.quantizers.values():
            q.unfreeze()

    def force_bits(self, bits: Dict[str, int]) -> None:
        for k, b in bits.items():
            self.quantizers[k].force_bits(b)

    # ---------------------------------------------------------------- forward

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = ad.as_tensor(np.asarray(x, dtype=np.float64))
        for l in self.arch.layers:
            if l.kind == "maxpool":
                h = ad.max_pool2d(h, l.kernel, l.stride)
                continue
            qa = self.quantizers[f"{l.name}.a"]
            qw = self.quantizers[f"{l.name}.w"]
            if l.kind == "fc" and h.data.ndim != 2:
                h = ad.flatten(h)
            if self._calib is not None:
                stat = np.abs(h.data).max() if qa.signed else max(float(h.data.max()), 0.0)
                self._calib.setdefault(qa.name, []).append(float(stat))
            h = qa(h, train=train, rng=rng)
            w, b = self.weights[l.name], self.biases[l.name]
            if qw.enabled:
                z = qw.gates(train, rng)
                w = qw(w, gates=z)
                b = ad.scale_channels(b, z[2], 0) if z[2].size > 1 else ad.mul(z[2], b)
            h = ad.conv2d(h, w, l.stride, l.pad) if l.kind == "conv" else ad.matmul(h, w)
            h = ad.add_channel(h, b)
            if l.activation == "relu":
                h = ad.relu(h)
        return h

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        preds = []
        for i in range(0, len(x), batch_size):
            preds.append(self.forward(x[i:i + batch_size]).data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def accuracy(self, x: np.ndarray, y: np.ndarray, batch_size: int = 1000) -> float:
        return float((self.predict(x, batch_size) == np.asarray(y)).mean())

    def calibrate_ranges(self, batches: Iterable[np.ndarray], momentum: float = 0.9) -> Dict[str, float]:
        """Set activation betas from an EMA of per-batch maxima (quantizers bypassed)."""
        enabled = {k: q.enabled for k, q in self.quantizers.items()}
        self.set_quantization(False)
        self._calib = {}
        try:
            for xb in batches:
                self.forward(xb)
        finally:
            stats, self._calib = self._calib, None
            for k, q in self.quantizers.items():
                q.enabled = enabled[k]
        out = {}
        for name, vals in stats.items():
            ema = vals[0]
            for v in vals[1:]:
                ema = momentum * ema + (1 - momentum) * v
            ema = max(ema, 1e-6)
            self.quantizers[name].beta.data = np.array(ema)
            out[name] = ema
        return out

    # ------------------------------------------------------------- reporting

    def effective_bits(self) -> Dict[str, tuple]:
        return {k: q.effective_bitwidth() for k, q in self.quantizers.items()}

    def bops(self) -> BopsResult:
        eff = self.effective_bits()
        bits = {k: v[0] for k, v in eff.items()}
        keep = {k: v[1] for k, v in eff.items()}
        return network_bops(self.cost, bits, keep)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.weights:
            out[f"{name}/weight"] = self.weights[name].data
            out[f"{name}/bias"] = self.biases[name].data
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name in self.weights:
            self.weights[name].data = np.array(arrays[f"{name}/weight"], dtype=np.float64)
            self.biases[name].data = np.array(arrays[f"{name}/bias"], dtype=np.float64)

    def weight_checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.weights:
            h.update(self.weights[name].data.tobytes())
            h.update(self.biases[name].data.tobytes())
        return h.hexdigest()
