"""Command-line front end: dataset generation, code-bank tooling, gradient
checking, training, and evaluation as reproducible subcommands.

Exit codes are a stable contract: 0 success, 1 gradient-check failure,
2 usage/config error, 3 numeric divergence. All randomness funnels through
one --seed per command; component streams derive from it by fixed offsets.
Set LTC_LOG={quiet,info,debug} to control verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import codes as codes_mod
from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import trainer as trainer_mod
from .core import Rng
from .errors import ConfigError, NumericError, TargetCodesError, TrainingDiverged
from .losses import Hyperparams

log = logging.getLogger("targetcodes")

# key -> (parser, formatter); the full set of recognized config-file keys
_CONFIG_KEYS = {
    "mode": (str, str),
    "seed": (int, str),
    "epochs": (int, str),
    "batch_size": (int, str),
    "eval_every": (int, str),
    "checkpoint_every": (int, str),
    "out_dir": (str, str),
    "train_data": (str, str),
    "test_data": (str, str),
    "feature_widths": (
        lambda s: tuple(int(v) for v in s.split(",") if v.strip()),
        lambda t: ",".join(str(v) for v in t),
    ),
    "encoder_hidden": (int, str),
    "num_classes": (int, str),
    "code_length": (int, str),
    "mse_weight": (float, repr),
    "triplet_weight": (float, repr),
    "corr_weight": (float, repr),
    "margin": (float, repr),
    "tanh_scale": (float, repr),
    "activation": (str, str),
    "ste_rule": (str, str),
    "lr_feature": (float, repr),
    "lr_new": (float, repr),
    "lr_codes": (float, repr),
    "momentum": (float, repr),
    "weight_decay": (float, repr),
    "decay_epochs": (
        lambda s: tuple(int(v) for v in s.split(",") if v.strip()),
        lambda t: ",".join(str(v) for v in t),
    ),
    "decay_factor": (float, repr),
    "decay_codes": (
        lambda s: {"true": True, "false": False}[s.lower()],
        lambda b: "true" if b else "false",
    ),
}

_DEFAULTS = {
    "mode": "baseline",
    "seed": 0,
    "epochs": 100,
    "batch_size": 16,
    "eval_every": 1,
    "checkpoint_every": 0,
    "out_dir": "run",
    "feature_widths": (256, 128),
    "encoder_hidden": 256,
    "code_length": 512,
    "mse_weight": 1.0,
    "triplet_weight": 0.01,
    "corr_weight": 0.1,
    "tanh_scale": 1.0,
    "activation": "sign",
    "ste_rule": "clipped",
    "lr_feature": 0.001,
    "lr_new": 0.01,
    "lr_codes": 0.1,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "decay_epochs": (40, 70),
    "decay_factor": 0.1,
    "decay_codes": True,
}


def parse_config_file(path) -> dict:
    """Read flat `key = value` lines; # starts a comment, blank lines skipped.
    Unknown keys are rejected."""
    values = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            try:
                values[key] = _CONFIG_KEYS[key][0](value)
            except (ValueError, KeyError):
                raise ConfigError(f"{path}:{line_no}: bad value {value!r} for {key}")
    return values


def format_config(values: dict) -> str:
    """Render resolved values as a config file that parses back equivalently."""
    lines = []
    for key in _CONFIG_KEYS:
        if key in values and values[key] is not None:
            lines.append(f"{key} = {_CONFIG_KEYS[key][1](values[key])}")
    return "\n".join(lines) + "\n"


def _apply_overrides(values: dict, pairs: list[str]) -> None:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key][0](value.strip())
        except (ValueError, KeyError):
            raise ConfigError(f"bad value {value!r} for {key}")


def _resolve_train_config(args) -> dict:
    values = dict(_DEFAULTS)
    if args.config:
        values.update(parse_config_file(args.config))
    if args.set:
        _apply_overrides(values, args.set)
    for flag, key in (
        ("mode", "mode"), ("seed", "seed"), ("epochs", "epochs"),
        ("length", "code_length"), ("data", "train_data"),
        ("test_data", "test_data"), ("out", "out_dir"), ("margin", "margin"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = _CONFIG_KEYS[key][0](str(v))
    return values


def _build_train_config(values: dict, num_classes: int) -> trainer_mod.TrainConfig:
    if "num_classes" in values and values["num_classes"] != num_classes:
        raise ConfigError(
            f"config says {values['num_classes']} classes, data has {num_classes}"
        )
    hp = Hyperparams(
        num_classes=num_classes,
        code_length=values["code_length"],
        mse_weight=values["mse_weight"],
        triplet_weight=values["triplet_weight"],
        corr_weight=values["corr_weight"],
        margin=values.get("margin"),
        tanh_scale=values["tanh_scale"],
        lr_feature=values["lr_feature"],
        lr_new=values["lr_new"],
        lr_codes=values["lr_codes"],
        momentum=values["momentum"],
        weight_decay=values["weight_decay"],
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        decay_epochs=values["decay_epochs"],
        decay_factor=values["decay_factor"],
        seed=values["seed"],
    )
    return trainer_mod.TrainConfig(
        mode=values["mode"],
        hp=hp,
        feature_widths=tuple(values["feature_widths"]),
        encoder_hidden=values["encoder_hidden"],
        activation=values["activation"],
        ste_rule=values["ste_rule"],
        decay_codes=values["decay_codes"],
        eval_every=values["eval_every"],
        checkpoint_every=values["checkpoint_every"],
        out_dir=values["out_dir"],
        train_data=values.get("train_data"),
        test_data=values.get("test_data"),
    )


def _bank_summary(bank: codes_mod.CodeBank) -> list[str]:
    s = codes_mod.activate(bank)
    ones = codes_mod.plus_one_counts(s)
    lines = [
        f"kind {bank.kind} classes {bank.num_classes} length {bank.code_length}",
        f"plus-one count per row: min {int(ones.min())} max {int(ones.max())}",
    ]
    if bank.num_classes >= 2:
        ham = codes_mod.pairwise_hamming(s)
        off = ham[~np.eye(bank.num_classes, dtype=bool)]
        corr = codes_mod.mean_abs_off_diagonal(codes_mod.normalized_correlation(s))
        lines.append(f"pairwise Hamming distance: min {int(off.min())} max {int(off.max())}")
        lines.append(f"mean abs normalized correlation: {corr:.6f}")
    return lines


def cmd_gen_codes(args) -> int:
    rng = Rng(args.seed)
    if args.mode == "hadamard":
        bank = codes_mod.select_hadamard_codes(args.length, args.classes, rng)
    else:
        bank = codes_mod.init_learnable_codes(
            args.classes, args.length, rng,
            activation=args.activation, tanh_scale=args.tanh_scale,
        )
    codes_mod.save_bank(bank, args.out)
    for line in _bank_summary(bank):
        print(line)
    print(f"wrote {args.out}")
    return 0


def cmd_inspect_codes(args) -> int:
    bank = codes_mod.load_bank(args.bank)
    s = codes_mod.activate(bank)
    ones = codes_mod.plus_one_counts(s)
    ham = codes_mod.pairwise_hamming(s)
    corr = codes_mod.normalized_correlation(s)
    print("row,plus_ones,min_hamming,max_hamming,mean_abs_corr")
    k = bank.num_classes
    for i in range(k):
        others = [j for j in range(k) if j != i]
        if others:
            h_min = int(ham[i, others].min())
            h_max = int(ham[i, others].max())
            c_mean = float(np.abs(corr[i, others]).mean())
        else:
            h_min = h_max = 0
            c_mean = 0.0
        print(f"{i},{int(ones[i])},{h_min},{h_max},{c_mean:.6f}")
    return 0


def cmd_make_data(args) -> int:
    rng = Rng(args.seed)
    per_class = args.per_class + (args.test_per_class if args.test_out else 0)
    ds = data_mod.make_blobs(
        args.classes, args.dim, args.groups, per_class,
        args.spread_within, args.spread_group, rng,
        class_center_spread=args.class_spread,
    )
    test = None
    if args.test_out:
        ds, test = data_mod.split_per_class(ds, args.test_per_class)
    if args.kind == "longtail":
        ds = data_mod.long_tail_subsample(ds, args.ratio, rng)
    data_mod.save_csv(ds, args.out)
    print("class counts:")
    for k, c in enumerate(ds.class_counts):
        print(f"  class {k}: {int(c)}")
    ratio = float(ds.class_counts.max() / ds.class_counts.min())
    print(f"achieved imbalance ratio: {ratio:.1f}")
    print(f"wrote {args.out}")
    if test is not None:
        data_mod.save_csv(test, args.test_out)
        print(f"wrote {args.test_out}")
    return 0


def cmd_train(args) -> int:
    values = _resolve_train_config(args)
    if not values.get("train_data") or not values.get("test_data"):
        raise ConfigError("train_data and test_data are required")
    train_ds = data_mod.load_csv(values["train_data"])
    test_ds = data_mod.load_csv(values["test_data"])
    values["num_classes"] = train_ds.num_classes
    config = _build_train_config(values, train_ds.num_classes)
    trainer_mod.validate_config(config, train_ds.num_classes)
    os.makedirs(config.out_dir, exist_ok=True)
    values["margin"] = config.hp.margin
    with open(os.path.join(config.out_dir, "resolved.cfg"), "w") as fh:
        fh.write(format_config(values))
    result = trainer_mod.train(
        config, train_ds, test_ds, resume_from=args.resume or None
    )
    final = result.metrics[-1]
    print(f"final epoch {final.epoch}: top1 {final.top1:.4f} top5 {final.top5:.4f}")
    print(f"metrics: {os.path.join(config.out_dir, 'metrics.jsonl')}")
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck_mod.run_suite(
        args.seed, rounds=args.rounds, tol=args.tol, perturb=args.perturb
    )
    print(f"{'check':<10} {'instances':>9} {'max_rel_err':>13} result")
    failures = []
    for row in rows:
        status = "pass" if row.passed else "FAIL"
        print(f"{row.name:<10} {row.instances:>9} {row.max_rel_err:>13.3e} {status}")
        if not row.passed:
            failures.append(row.name)
    if failures:
        print(f"failing checks: {', '.join(failures)}")
        return 1
    return 0


def cmd_eval(args) -> int:
    state = trainer_mod.checkpoint_load(args.checkpoint)
    ds = data_mod.load_csv(args.data)
    top1, top5 = trainer_mod.evaluate(state.model, ds)
    print(f"top1 {top1:.4f} top5 {top5:.4f}")
    if args.retrieval:
        report = trainer_mod.retrieval_eval(state.model, ds)
        for k in sorted(report.recall_at):
            print(f"recall@{k} {report.recall_at[k]:.4f}")
        if report.skipped_queries:
            print(f"skipped queries (singleton class): {report.skipped_queries}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="targetcodes",
        description="Target-coding regularization: codes, data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-codes", help="generate a code bank file")
    p.add_argument("--mode", choices=["hadamard", "learnable"], required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--activation", choices=["sign", "tanh_scaled"], default="sign")
    p.add_argument("--tanh-scale", dest="tanh_scale", type=float, default=1.0)
    p.set_defaults(fn=cmd_gen_codes)

    p = sub.add_parser("inspect-codes", help="print code bank properties as CSV")
    p.add_argument("--bank", required=True)
    p.set_defaults(fn=cmd_inspect_codes)

    p = sub.add_parser("make-data", help="generate a synthetic CSV dataset")
    p.add_argument("--kind", choices=["blobs", "longtail"], required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--groups", type=int, default=2)
    p.add_argument("--per-class", dest="per_class", type=int, default=100)
    p.add_argument("--spread-within", dest="spread_within", type=float, default=1.0)
    p.add_argument("--spread-group", dest="spread_group", type=float, default=6.0)
    p.add_argument("--class-spread", dest="class_spread", type=float, default=1.0)
    p.add_argument("--ratio", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--test-out", dest="test_out")
    p.add_argument("--test-per-class", dest="test_per_class", type=int, default=25)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train", help="train per a config file plus overrides")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--mode", choices=["baseline", "htc", "ltc"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--length", type=int, help="code length override")
    p.add_argument("--margin", type=float)
    p.add_argument("--data", help="training CSV")
    p.add_argument("--test-data", dest="test_data", help="test CSV")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--perturb", action="store_true",
                   help="inject a gradient bug; the suite must fail")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a CSV dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--retrieval", action="store_true")
    p.set_defaults(fn=cmd_eval)
    return parser


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("LTC_LOG", "info"), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.checkpoint_path:
            print(f"last good checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (TargetCodesError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
