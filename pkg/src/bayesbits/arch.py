"""Declarative network descriptions.

Two forms are accepted for ``layers``:

* shorthand string, e.g. ``"32C5-MP2-64C5-MP2-512FC-Softmax"`` or
  ``"2x(128C3)-MP2-1024FC-Softmax"`` (``nCk`` = conv with n maps and k x k
  kernels, ``MPk`` = k x k max-pool with stride k, ``nFC`` = dense layer with
  n units, ``Softmax`` = the classifier layer);
* a list of dicts with keys ``kind`` (conv | fc | maxpool), ``out``,
  ``kernel``, ``stride``, ``pad``, ``activation`` (relu | none), ``prune``.

Hidden conv/fc layers use ReLU and prune their output channels unless told
otherwise; the classifier does neither.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .cost import LayerCost, NetworkCost
from .quantizer import LADDER


class ArchError(ValueError):
    """Malformed or shape-inconsistent architecture description."""


@dataclass
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 1
    stride: int = 1
    pad: Optional[int] = None
    activation: str = "relu"
    prune: Optional[bool] = None
    name: str = ""


@dataclass
class ArchSpec:
    input_shape: Tuple[int, ...]
    num_classes: int
    layers: List[LayerSpec]
    input_signed: bool = False
    ladder: Tuple[int, ...] = LADDER
    # filled in by resolve()
    shapes: List[Tuple[int, ...]] = field(default_factory=list, repr=False)

    def weight_layers(self) -> List[LayerSpec]:
        return [l for l in self.layers if l.kind in ("conv", "fc")]

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            d = {"kind": l.kind, "name": l.name}
            if l.kind in ("conv", "fc"):
                d.update(out=l.out, activation=l.activation, prune=bool(l.prune))
            if l.kind in ("conv", "maxpool"):
                d.update(kernel=l.kernel, stride=l.stride)
            if l.kind == "conv":
                d["pad"] = l.pad
            layers.append(d)
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "input_signed": self.input_signed,
            "ladder": list(self.ladder),
            "layers": layers,
        }


_TOKEN_CONV = re.compile(r"^(\d+)C(\d+)$")
_TOKEN_FC = re.compile(r"^(\d+)FC$")
_TOKEN_MP = re.compile(r"^MP(\d+)$")
_TOKEN_REP = re.compile(r"^(\d+)x\((.+)\)$")


def parse_shorthand(text: str) -> List[LayerSpec]:
    tokens = [t.strip() for t in text.split("-") if t.strip()]
    if not tokens:
        raise ArchError("empty layer string")
    out: List[LayerSpec] = []
    for i, tok in enumerate(tokens):
        m = _TOKEN_REP.match(tok)
        if m:
            inner = parse_shorthand(m.group(2))
            for _ in range(int(m.group(1))):
                out.extend(LayerSpec(**vars(l)) for l in inner)
            continue
        if tok.lower() == "softmax":
            if i != len(tokens) - 1:
                raise ArchError("Softmax must be the last token")
            out.append(LayerSpec("fc", out=-1, activation="none", prune=False))
            continue
        if m := _TOKEN_CONV.match(tok):
            k = int(m.group(2))
            out.append(LayerSpec("conv", out=int(m.group(1)), kernel=k, pad=k // 2))
        elif m := _TOKEN_FC.match(tok):
            out.append(LayerSpec("fc", out=int(m.group(1))))
        elif m := _TOKEN_MP.match(tok):
            k = int(m.group(1))
            out.append(LayerSpec("maxpool", kernel=k, stride=k))
        else:
            raise ArchError(f"unrecognised layer token {tok!r}")
    return out


_LAYER_KEYS = {"kind", "out", "kernel", "stride", "pad", "activation", "prune", "name"}
_ARCH_KEYS = {"input_shape", "num_classes", "layers", "input_signed", "ladder"}


def _layer_from_dict(d: dict) -> LayerSpec:
    unknown = set(d) - _LAYER_KEYS
    if unknown:
        raise ArchError(f"unknown layer keys {sorted(unknown)}")
    if d.get("kind") not in ("conv", "fc", "maxpool"):
        raise ArchError(f"layer kind must be conv, fc or maxpool, got {d.get('kind')!r}")
    spec = LayerSpec(**d)
    if spec.activation not in ("relu", "none"):
        raise ArchError(f"activation must be relu or none, got {spec.activation!r}")
    if spec.kind == "conv" and spec.pad is None:
        spec.pad = spec.kernel // 2
    return spec


def parse_arch(cfg: dict) -> ArchSpec:
    if not isinstance(cfg, dict):
        raise ArchError("architecture must be a mapping")
    unknown = set(cfg) - _ARCH_KEYS
    if unknown:
        raise ArchError(f"unknown architecture keys {sorted(unknown)}")
    for key in ("input_shape", "num_classes", "layers"):
        if key not in cfg:
            raise ArchError(f"missing architecture key {key!r}")
    layers = cfg["layers"]
    if isinstance(layers, str):
        specs = parse_shorthand(layers)
    elif isinstance(layers, list):
        specs = [_layer_from_dict(d) for d in layers]
    else:
        raise ArchError("layers must be a shorthand string or a list of mappings")
    n_cls = int(cfg["num_classes"])
    for l in specs:
        if l.out == -1:
            l.out = n_cls
    arch = ArchSpec(
        input_shape=tuple(int(v) for v in cfg["input_shape"]),
        num_classes=n_cls,
        layers=specs,
        input_signed=bool(cfg.get("input_signed", False)),
        ladder=tuple(cfg.get("ladder", LADDER)),
    )
    resolve(arch)
    return arch


def resolve(arch: ArchSpec) -> ArchSpec:
    """Name layers, fill defaults and check that shapes chain."""
    if arch.num_classes < 2:
        raise ArchError("need at least two classes")
    if len(arch.input_shape) not in (1, 3) or min(arch.input_shape) < 1:
        raise ArchError(f"input_shape must be (features,) or (C, H, W), got {arch.input_shape}")
    wl = arch.weight_layers()
    if not wl:
        raise ArchError("network has no weight layers")
    if wl[-1].kind != "fc" or wl[-1].out != arch.num_classes:
        raise ArchError("last weight layer must be fc with num_classes outputs")
    if arch.layers[-1] is not wl[-1]:
        raise ArchError("nothing may follow the classifier layer")
    shape = arch.input_shape
    shapes = []
    counts = {"conv": 0, "fc": 0, "maxpool": 0}
    for l in arch.layers:
        counts[l.kind] += 1
        if not l.name:
            l.name = {"conv": "conv", "fc": "fc", "maxpool": "pool"}[l.kind] + str(counts[l.kind])
        if l.kind in ("conv", "fc") and l.out < 1:
            raise ArchError(f"{l.name}: output size must be positive")
        if l.kind == "conv":
            if len(shape) != 3:
                raise ArchError(f"{l.name}: conv needs a (C, H, W) input, got {shape}")
            if l.kernel < 1 or l.stride < 1 or l.pad < 0:
                raise ArchError(f"{l.name}: bad kernel/stride/pad")
            h = (shape[1] + 2 * l.pad - l.kernel) // l.stride + 1
            w = (shape[2] + 2 * l.pad - l.kernel) // l.stride + 1
            if h < 1 or w < 1:
                raise ArchError(f"{l.name}: output would be empty for input {shape}")
            shape = (l.out, h, w)
        elif l.kind == "maxpool":
            if len(shape) != 3 or l.kernel < 1:
                raise ArchError(f"{l.name}: max-pool needs a (C, H, W) input")
            h = (shape[1] - l.kernel) // l.stride + 1
            w = (shape[2] - l.kernel) // l.stride + 1
            if h < 1 or w < 1:
                raise ArchError(f"{l.name}: pooled output would be empty for input {shape}")
            shape = (shape[0], h, w)
        else:
            shape = (l.out,)
        if l.prune is None:
            l.prune = l is not wl[-1]
        if l is wl[-1]:
            l.activation = "none"
        shapes.append(shape)
    arch.shapes = shapes
    return arch


def _flat(shape: Tuple[int, ...]) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def build_cost_model(arch: ArchSpec) -> NetworkCost:
    """One LayerCost per weight layer; quantizer ids are ``<layer>.w`` / ``<layer>.a``."""
    layers = []
    prev_shape = arch.input_shape
    prev_weight = None
    for l, shape in zip(arch.layers, arch.shapes):
        if l.kind == "conv":
            layers.append(LayerCost(
                l.name, "conv", prev_shape[0], l.out, shape[1], shape[2], l.kernel, l.kernel,
                f"{l.name}.w", f"{l.name}.a", (prev_weight,) if prev_weight else (),
            ))
            prev_weight = l.name
        elif l.kind == "fc":
            c_in = _flat(prev_shape)
            # a flattened conv map keeps the channel pruning ratio of its producer
            layers.append(LayerCost(
                l.name, "fc", c_in, l.out, weight_quantizer=f"{l.name}.w", input_quantizer=f"{l.name}.a",
                producers=(prev_weight,) if prev_weight else (),
            ))
            prev_weight = l.name
        prev_shape = shape
    return NetworkCost(layers)
