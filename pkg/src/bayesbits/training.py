"""Training protocols: joint gate/weight training, fixed-gate fine-tuning,
post-training gate learning on frozen weights, and the sensitivity baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .gates import HardConcrete
from .model import Model
from .objective import total_loss
from .optim import SCHEDULES, apply_schedule, make_optimizer

log = logging.getLogger(__name__)

MODES = ("joint", "post-train-gates", "post-train-gates-and-scales")
MIN_BETA = 1e-8


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, snapshot: dict):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    epochs: int = 10
    finetune_epochs: int = 0
    batch_size: int = 128
    lr_weights: float = 1e-3
    lr_gates: float = 1e-3
    lr_ranges: float = 1e-3
    lr_finetune: float = 1e-4
    weight_optimizer: str = "adam"
    momentum: float = 0.9
    schedule: str = "linear-decay"
    mu: float = 0.0
    seed: int = 0
    mode: str = "joint"
    phi_init: float = 6.0
    tau: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1
    threshold: float = 0.34
    calibration_batches: int = 20
    calibration_size: int = 0  # 0 = use the whole small-data split (post-training)
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        for name in ("lr_weights", "lr_gates", "lr_ranges", "lr_finetune"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.weight_optimizer not in ("adam", "sgd"):
            raise ValueError("weight_optimizer must be adam or sgd")
        self.hc  # validates the hard-concrete shape

    @property
    def hc(self) -> HardConcrete:
        return HardConcrete(self.tau, self.gamma, self.zeta, self.threshold)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    train_ce: float
    regularizer: float
    accuracy: float
    relative_bops: float
    bits: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParetoPoint:
    mu: float
    accuracy: float
    relative_bops: float
    label: str = ""


def _bits_snapshot(model: Model) -> Dict[str, List[float]]:
    return {k: [int(b), float(r)] for k, (b, r) in model.effective_bits().items()}


def _snapshot(model: Model, step: int) -> dict:
    return {
        "step": step,
        "betas": {k: float(q.beta.data) for k, q in model.quantizers.items()},
        "phi": {k: {b: np.asarray(p.data).tolist() for b, p in q.phi.items()} for k, q in model.quantizers.items()},
        "weight_norms": {k: float(np.linalg.norm(w.data)) for k, w in model.weights.items()},
    }


def _evaluate(model: Model, data: Optional[Dataset]) -> float:
    return model.accuracy(data.x, data.y) if data is not None and len(data) else float("nan")


def _run(
    model: Model,
    train: Dataset,
    test: Optional[Dataset],
    cfg: TrainConfig,
    epochs: int,
    groups: Sequence[Tuple[str, list, float]],
    schedule: str,
    mu: float,
    phase: str,
    rng: np.random.Generator,
    callback: Optional[Callable[[EpochRecord], None]] = None,
) -> List[EpochRecord]:
    opts = []
    for kind, params, lr in groups:
        if params:
            opts.append(make_optimizer(kind, params, lr, cfg.momentum))
    all_params = [p for o in opts for p in o.params]
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = epochs * steps_per_epoch
    quantizers = list(model.quantizers.values())
    history = []
    step = 0
    for epoch in range(epochs):
        sums = np.zeros(3)
        count = 0
        for xb, yb in train.batches(cfg.batch_size, rng):
            apply_schedule(opts, schedule, step, total)
            logits = model.forward(xb, train=True, rng=rng)
            loss, ce, reg = total_loss(logits, yb, quantizers, mu)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became {float(loss.data)} at step {step}", _snapshot(model, step))
            for p in all_params:
                p.grad = None
            loss.backward()
            for o in opts:
                o.step()
            for q in quantizers:
                if q.beta.data <= MIN_BETA:
                    q.beta.data = np.array(MIN_BETA)
            sums += (float(loss.data), float(ce.data), float(reg.data))
            count += len(yb)
            step += 1
        n_batches = max(steps_per_epoch, 1)
        last = epoch == epochs - 1
        acc = _evaluate(model, test) if (last or (epoch + 1) % max(cfg.eval_every, 1) == 0) else float("nan")
        rec = EpochRecord(
            epoch=epoch + 1, phase=phase,
            train_loss=sums[0] / n_batches, train_ce=sums[1] / n_batches, regularizer=sums[2] / n_batches,
            accuracy=acc, relative_bops=model.bops().relative, bits=_bits_snapshot(model),
        )
        log.info("%s epoch %d loss %.4f acc %.4f rel-bops %.4f%%", phase, rec.epoch, rec.train_loss, acc, rec.relative_bops)
        history.append(rec)
        if callback:
            callback(rec)
    return history


def calibrate(model: Model, data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> None:
    xs = [xb for _, (xb, _) in zip(range(cfg.calibration_batches), data.batches(cfg.batch_size, rng))]
    model.calibrate_ranges(xs)
    model.reset_weight_ranges()


def train_joint(model: Model, train: Dataset, test: Optional[Dataset], cfg: TrainConfig, callback=None, calibrate_first: bool = True) -> List[EpochRecord]:
    """Weights, gates and ranges together; weights use their own optimizer group."""
    rng = np.random.default_rng(cfg.seed)
    if calibrate_first:
        calibrate(model, train, cfg, rng)
    groups = [
        (cfg.weight_optimizer, model.weight_params(), cfg.lr_weights),
        ("adam", model.gate_params(), cfg.lr_gates),
        ("adam", model.range_params(), cfg.lr_ranges),
    ]
    return _run(model, train, test, cfg, cfg.epochs, groups, cfg.schedule, cfg.mu, "joint", rng, callback)


def fix_gates_and_finetune(model: Model, train: Dataset, test: Optional[Dataset], cfg: TrainConfig, callback=None) -> List[EpochRecord]:
    """Threshold and freeze every gate, then tune weights and ranges with cosine annealing."""
    model.freeze_gates()
    rng = np.random.default_rng(cfg.seed + 1)
    groups = [
        (cfg.weight_optimizer, model.weight_params(), cfg.lr_finetune),
        ("adam", model.range_params(), cfg.lr_finetune),
    ]
    return _run(model, train, test, cfg, cfg.finetune_epochs, groups, "cosine", 0.0, "finetune", rng, callback)


def post_train(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    eval_data: Optional[Dataset] = None,
    callback=None,
    calibrate_first: bool = True,
) -> Tuple[ParetoPoint, List[EpochRecord]]:
    """Learn gates (and, in gates-and-scales mode, ranges) with the weights held fixed.

    Quantization is switched on for every quantizer. Ranges start from the
    small dataset (activations) and the weights themselves unless
    ``calibrate_first`` is False.
    """
    if cfg.mode == "joint":
        raise ValueError("post_train needs a post-train-* mode")
    if cfg.calibration_size:
        data = data.subset(cfg.calibration_size)
    rng = np.random.default_rng(cfg.seed)
    model.set_quantization(True)
    if calibrate_first:
        calibrate(model, data, cfg, rng)
    groups = [("adam", model.gate_params(), cfg.lr_gates)]
    if cfg.mode == "post-train-gates-and-scales":
        groups.append(("adam", model.range_params(), cfg.lr_ranges))
    history = _run(model, data, eval_data, cfg, cfg.epochs, groups, cfg.schedule, cfg.mu, cfg.mode, rng, callback)
    acc = _evaluate(model, eval_data if eval_data is not None else data)
    return ParetoPoint(cfg.mu, acc, model.bops().relative, cfg.mode), history


def pareto_front(points: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Non-dominated (bops, accuracy) points, ascending in BOPs.

    A point is dominated when another has no more BOPs and no less accuracy
    and differs in at least one of the two.
    """
    uniq = sorted(set((float(b), float(a)) for b, a in points))
    front = []
    for b, a in uniq:
        dominated = any(b2 <= b and a2 >= a and (b2, a2) != (b, a) for b2, a2 in uniq)
        if not dominated:
            front.append((b, a))
    return front


@dataclass
class BaselineResult:
    order: List[str]
    sensitivity: Dict[str, float]
    curve: List[Tuple[float, float]]
    front: List[Tuple[float, float]]
    reference_accuracy: float


def sensitivity_baseline(model: Model, data: Dataset, low_bits: int, high_bits: int = 16) -> BaselineResult:
    """Cumulative low-bit quantization in order of increasing sensitivity.

    Sensitivity of a quantizer is the accuracy drop when it alone is set to
    ``low_bits`` with all others at ``high_bits``; ties keep layer order.
    """
    names = list(model.quantizers)
    saved = {k: q.frozen for k, q in model.quantizers.items()}
    try:
        base = {k: high_bits for k in names}
        model.force_bits(base)
        ref = model.accuracy(data.x, data.y)
        sens = {}
        for k in names:
            model.force_bits({**base, k: low_bits})
            sens[k] = ref - model.accuracy(data.x, data.y)
            model.force_bits({k: high_bits})
        order = sorted(names, key=lambda k: (sens[k], names.index(k)))
        model.force_bits(base)
        curve = [(model.bops().relative, ref)]
        current = dict(base)
        for k in order:
            current[k] = low_bits
            model.force_bits(current)
            curve.append((model.bops().relative, model.accuracy(data.x, data.y)))
    finally:
        for k, q in model.quantizers.items():
            q.frozen = saved[k]
    return BaselineResult(order, sens, curve, pareto_front(curve), ref)

