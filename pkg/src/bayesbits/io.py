"""Config files, reports, Pareto CSVs and checkpoints.

All writes go through a temp file in the target directory followed by an
atomic rename.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .arch import parse_arch
from .cost import FULL_PRECISION, NetworkCost, network_bops
from .model import Model
from .quantizer import Quantizer

CKPT_MAGIC = b"BAYESBIT"
CKPT_VERSION = 1

DATA_KEYS = {"source", "dir", "train_limit", "test_limit", "normalize", "synthetic"}
SYNTH_KEYS = {"n_train", "n_test", "classes", "dim", "margin"}
CONFIG_KEYS = {"arch", "train", "data"}


class ConfigFileError(ValueError):
    """Malformed or unknown configuration entries."""


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> None:
    atomic_write(path, dumps(obj).encode())


# ------------------------------------------------------------------- config

def validate_config(cfg: dict) -> dict:
    """Reject unknown keys at every level; returns the same mapping."""
    if not isinstance(cfg, dict):
        raise ConfigFileError("config root must be a mapping")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigFileError(f"unknown config keys: {sorted(unknown)}")
    data = cfg.get("data", {})
    unknown = set(data) - DATA_KEYS
    if unknown:
        raise ConfigFileError(f"unknown data keys: {sorted(unknown)}")
    unknown = set(data.get("synthetic", {})) - SYNTH_KEYS
    if unknown:
        raise ConfigFileError(f"unknown synthetic-data keys: {sorted(unknown)}")
    if data.get("source", "mnist") not in ("mnist", "synthetic"):
        raise ConfigFileError("data.source must be mnist or synthetic")
    return cfg


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigFileError(f"{path}: {e}") from e


def load_config(path) -> dict:
    return validate_config(load_json(path))


# ------------------------------------------------------------------- report

def build_report(
    cost: NetworkCost,
    eff: Dict[str, tuple],
    lambdas: Dict[str, Dict[int, float]],
    accuracy: Optional[float],
    config: dict,
    seed: Optional[int],
    extra: Optional[Dict[str, dict]] = None,
) -> dict:
    """Report from a cost model and per-quantizer (bits, keep ratio) pairs.

    ``extra`` adds fields (e.g. beta) to individual quantizer entries.
    """
    res = network_bops(cost, {k: v[0] for k, v in eff.items()}, {k: v[1] for k, v in eff.items()})
    quantizers = []
    for k, (b, keep) in eff.items():
        quantizers.append({
            "id": k, "bits": int(b), "keep_ratio": float(keep), "prune_ratio": 1.0 - float(keep),
            "lambda_prime": {str(bb): lam for bb, lam in lambdas.get(k, {}).items()},
            **(extra or {}).get(k, {}),
        })
    layers = [{"name": name, **vals} for name, vals in res.per_layer.items()]
    return {
        "accuracy": accuracy,
        "config": config,
        "layers": layers,
        "quantizers": quantizers,
        "seed": seed,
        "totals": {
            "absolute_bops": res.absolute,
            "relative_bops": res.relative,
            "macs": cost.total_macs(),
        },
    }


def model_report(model: Model, accuracy: Optional[float], config: dict, seed: Optional[int]) -> dict:
    extra = {k: {"signed": q.signed, "beta": float(q.beta.data)} for k, q in model.quantizers.items()}
    lambdas = {k: q.lambdas for k, q in model.quantizers.items()}
    return build_report(model.cost, model.effective_bits(), lambdas, accuracy, config, seed, extra)


def recompute_totals(report: dict) -> dict:
    """Totals rebuilt from the per-layer entries of a parsed report."""
    absolute = 0.0
    macs = 0
    for l in report["layers"]:
        absolute += l["p_i"] * l["p_o"] * l["macs"] * l["b_w"] * l["b_a"]
        macs += l["macs"]
    return {
        "absolute_bops": absolute,
        "relative_bops": 100.0 * absolute / (macs * FULL_PRECISION * FULL_PRECISION),
        "macs": macs,
    }


def write_front_csv(path, rows: Iterable[Sequence]) -> None:
    """Rows of (mu, accuracy, relative_bops); mu may be None."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mu", "accuracy", "relative_bops"])
    for mu, acc, bops in rows:
        w.writerow(["" if mu is None else repr(float(mu)), repr(float(acc)), repr(float(bops))])
    atomic_write(path, buf.getvalue().encode())


def read_front_csv(path) -> List[tuple]:
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        return [(None if row["mu"] == "" else float(row["mu"]), float(row["accuracy"]), float(row["relative_bops"])) for row in r]


def write_history(path, records) -> None:
    lines = "".join(json.dumps(r.to_dict(), sort_keys=True, default=_jsonable) + "\n" for r in records)
    atomic_write(path, lines.encode())


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: Model, meta: Optional[dict] = None) -> None:
    """Versioned header (magic, version, JSON length, JSON) followed by an npz payload."""
    header = {
        "arch": model.arch.to_dict(),
        "quantizers": [q.state_dict() for q in model.quantizers.values()],
        "meta": meta or {},
    }
    hbytes = dumps(header).encode()
    arrays = io.BytesIO()
    np.savez(arrays, **model.state_arrays())
    payload = CKPT_MAGIC + struct.pack(">IQ", CKPT_VERSION, len(hbytes)) + hbytes + arrays.getvalue()
    atomic_write(path, payload)


def load_checkpoint(path) -> tuple:
    """Returns (model, meta)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ConfigFileError(f"{path}: {e}") from e
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ConfigFileError(f"{path}: not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    version, hlen = struct.unpack(">IQ", raw[off:off + 12])
    if version != CKPT_VERSION:
        raise ConfigFileError(f"{path}: unsupported checkpoint version {version}")
    off += 12
    header = json.loads(raw[off:off + hlen].decode())
    arch = parse_arch(header["arch"])
    model = Model(arch)
    with np.load(io.BytesIO(raw[off + hlen:])) as npz:
        model.load_arrays({k: npz[k] for k in npz.files})
    for st in header["quantizers"]:
        model.quantizers[st["name"]] = Quantizer.from_state(st)
    return model, header["meta"]
