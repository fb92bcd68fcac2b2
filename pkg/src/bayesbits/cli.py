"""Command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence, 4 a self-check failed.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from . import __version__
from . import io as bio
from .arch import ArchError, build_cost_model, parse_arch
from .checks import SUITES
from .cost import lambda_table
from .data import DataFormatError, Dataset, load_mnist, normalize, synth_dataset
from .model import Model
from .quantizer import ConfigError
from .training import (
    DivergenceError,
    TrainConfig,
    fix_gates_and_finetune,
    post_train,
    sensitivity_baseline,
    train_joint,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3, 4

log = logging.getLogger("bayesbits")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config

def _effective_config(args) -> dict:
    cfg = bio.load_config(args.config) if getattr(args, "config", None) else {}
    cfg = copy.deepcopy(cfg)
    train = cfg.setdefault("train", {})
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "mu", None) is not None:
        train["mu"] = args.mu
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "data_dir", None):
        cfg.setdefault("data", {})["dir"] = args.data_dir
    return bio.validate_config(cfg)


def _train_config(cfg: dict, **overrides) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**cfg.get("train", {}), **overrides})
    except KeyError as e:
        raise UsageError(f"train section: {e.args[0]}") from e


def load_data(cfg: dict, seed: int) -> Tuple[Dataset, Dataset]:
    data = cfg.get("data", {})
    if data.get("source", "mnist") == "synthetic":
        syn = {"n_train": 1000, "n_test": 1000, "classes": 10, "dim": 16, "margin": 3.0, **data.get("synthetic", {})}
        full = synth_dataset(seed, syn["n_train"] + syn["n_test"], syn["classes"], syn["dim"], syn["margin"])
        train = Dataset(full.x[:syn["n_train"]], full.y[:syn["n_train"]])
        test = Dataset(full.x[syn["n_train"]:], full.y[syn["n_train"]:])
    else:
        train = load_mnist(data.get("dir"), "train", data.get("train_limit"))
        test = load_mnist(data.get("dir"), "test", data.get("test_limit"))
    return normalize(train, test, kind=data.get("normalize", "none"))


def _arch(cfg: dict):
    if "arch" not in cfg:
        raise UsageError("config has no arch section")
    return parse_arch(cfg["arch"])


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _finish(out: Path, model: Model, acc: float, cfg: dict, seed: int, history, meta: dict) -> None:
    bio.save_checkpoint(out / "model.ckpt", model, {**meta, "config": cfg})
    report = bio.model_report(model, acc, cfg, seed)
    bio.write_json(out / "report.json", report)
    if history:
        bio.write_history(out / "history.jsonl", history)
    print(f"accuracy {acc:.4f} relative_bops {report['totals']['relative_bops']:.6g}% -> {out}")


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _effective_config(args)
    tc = _train_config(cfg)
    cfg["train"] = tc.to_dict()
    arch = _arch(cfg)
    train, test = load_data(cfg, tc.seed)
    model = Model(arch, seed=tc.seed, phi_init=tc.phi_init, hc=tc.hc)
    out = _out(args)
    history = train_joint(model, train, test, tc)
    if tc.finetune_epochs:
        history += fix_gates_and_finetune(model, train, test, tc)
    _finish(out, model, model.accuracy(test.x, test.y), cfg, tc.seed, history, {"stage": "train"})
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _effective_config(args)
    tc = _train_config(cfg)
    if tc.finetune_epochs < 1:
        raise UsageError("finetune needs train.finetune_epochs >= 1")
    cfg["train"] = tc.to_dict()
    model, _ = bio.load_checkpoint(args.checkpoint)
    train, test = load_data(cfg, tc.seed)
    out = _out(args)
    history = fix_gates_and_finetune(model, train, test, tc)
    _finish(out, model, model.accuracy(test.x, test.y), cfg, tc.seed, history, {"stage": "finetune"})
    return EXIT_OK


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad number list {text!r}") from e


def cmd_post_train(args) -> int:
    cfg = _effective_config(args)
    overrides = {"mode": f"post-train-{args.mode}"} if args.mode else {}
    tc = _train_config(cfg, **overrides)
    if tc.mode == "joint":
        raise UsageError("post-train needs --mode gates or gates-and-scales (or train.mode in the config)")
    mus = _parse_floats(args.mu_sweep) if args.mu_sweep else [tc.mu]
    pretrained, _ = bio.load_checkpoint(args.checkpoint)
    train, test = load_data(cfg, tc.seed)
    out = _out(args)
    rows = []
    for mu in mus:
        tcm = _train_config(cfg, **overrides, mu=mu)
        model = Model(pretrained.arch, seed=tcm.seed, phi_init=tcm.phi_init, hc=tcm.hc)
        model.load_arrays(pretrained.state_arrays())
        point, history = post_train(model, train, tcm, eval_data=test)
        rows.append((mu, point.accuracy, point.relative_bops))
        run_cfg = {**cfg, "train": tcm.to_dict()}
        bio.write_json(out / f"report-mu{mu:g}.json", bio.model_report(model, point.accuracy, run_cfg, tcm.seed))
        bio.write_history(out / f"history-mu{mu:g}.jsonl", history)
        print(f"mu {mu:g} accuracy {point.accuracy:.4f} relative_bops {point.relative_bops:.6g}%")
    bio.write_front_csv(out / "front.csv", rows)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _effective_config(args)
    tc = _train_config(cfg)
    model, _ = bio.load_checkpoint(args.checkpoint)
    _, test = load_data(cfg, tc.seed)
    res = sensitivity_baseline(model, test, args.low_bits, args.high_bits)
    out = _out(args)
    bio.write_front_csv(out / "front.csv", [(None, acc, bops) for bops, acc in res.front])
    bio.write_json(out / "baseline.json", {
        "config": cfg, "seed": tc.seed, "low_bits": args.low_bits, "high_bits": args.high_bits,
        "order": res.order, "sensitivity": res.sensitivity, "reference_accuracy": res.reference_accuracy,
        "curve": [{"relative_bops": b, "accuracy": a} for b, a in res.curve],
    })
    for b, a in res.front:
        print(f"accuracy {a:.4f} relative_bops {b:.6g}%")
    return EXIT_OK


def cmd_bops(args) -> int:
    if args.checkpoint:
        model, meta = bio.load_checkpoint(args.checkpoint)
        if args.weight_bits or args.act_bits:
            model.force_bits({q.name: args.weight_bits for q in model.weight_quantizers() if args.weight_bits})
            model.force_bits({q.name: args.act_bits for q in model.activation_quantizers() if args.act_bits})
        report = bio.model_report(model, None, meta.get("config", {}), meta.get("config", {}).get("train", {}).get("seed"))
    else:
        if args.arch:
            arch_cfg = bio.load_json(args.arch)
        elif args.config:
            arch_cfg = _effective_config(args).get("arch")
            if arch_cfg is None:
                raise UsageError("config has no arch section")
        else:
            raise UsageError("bops needs --arch, --config or --checkpoint")
        arch = parse_arch(arch_cfg)
        cost = build_cost_model(arch)
        wb, ab = args.weight_bits or 32, args.act_bits or 32
        eff = {}
        for l in cost.layers:
            eff[l.input_quantizer] = (ab, 1.0)
            eff[l.weight_quantizer] = (wb, 1.0)
        lams = lambda_table(cost, {k: arch.ladder for k in eff})
        report = bio.build_report(cost, eff, lams, None, {"arch": arch.to_dict(), "weight_bits": wb, "act_bits": ab}, None)
    if args.out:
        bio.write_json(_out(args) / "report.json", report)
    t = report["totals"]
    print(f"absolute_bops {t['absolute_bops']:.6g} relative_bops {t['relative_bops']:.6g}% macs {t['macs']}")
    return EXIT_OK


def cmd_check(args) -> int:
    names = args.suite or list(SUITES)
    failed = 0
    for name in names:
        for r in SUITES[name](args.seed if args.seed is not None else 0):
            print(r.line())
            failed += not r.passed
    print(f"{failed} failure(s)")
    return EXIT_CHECK if failed else EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bayesbits", description="Gated mixed-precision quantization and pruning.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True, out_default="bayesbits-out"):
        sp.add_argument("--config", required=config_required, help="JSON config with arch/train/data sections")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--mu", type=float, help="override train.mu")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--data-dir", help="MNIST IDX directory (overrides data.dir)")

    sp = sub.add_parser("train", help="joint training of weights, gates and ranges")
    common(sp)
    sp.add_argument("--epochs", type=int, help="override train.epochs")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="freeze gates from a checkpoint and fine-tune")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("post-train", help="learn gates on a frozen pretrained model")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("gates", "gates-and-scales"))
    sp.add_argument("--mu-sweep", help="comma-separated mu values (default: the single configured mu)")
    sp.add_argument("--epochs", type=int, help="override train.epochs")
    sp.set_defaults(func=cmd_post_train)

    sp = sub.add_parser("baseline", help="sensitivity-ordered low-bit baseline front")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--low-bits", type=int, default=4)
    sp.add_argument("--high-bits", type=int, default=16)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("bops", help="BOP count of a declared or trained network")
    common(sp, config_required=False, out_default=None)
    sp.add_argument("--arch", help="JSON architecture file")
    sp.add_argument("--checkpoint")
    sp.add_argument("--weight-bits", type=int, help="uniform weight bit width")
    sp.add_argument("--act-bits", type=int, help="uniform activation bit width")
    sp.set_defaults(func=cmd_bops)

    sp = sub.add_parser("check", help="run the oracle self-check suites")
    sp.add_argument("--suite", action="append", choices=sorted(SUITES))
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_check)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DivergenceError as e:
        out = Path(getattr(args, "out", None) or ".")
        bio.write_json(out / "divergence.json", {"error": str(e), "snapshot": e.snapshot})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, bio.ConfigFileError, ArchError, ConfigError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
