"""Command-line entry point: training, attack generation, evaluation,
parameter sweeps, and report rendering, all driven by one JSON run-config.

Every command is a pure function of (config, flags, file system inputs);
reruns reproduce outputs byte for byte. Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import data as datamod
from . import evalsuite, zoo
from . import tensor as ts
from .attacks import (
    ATTACKS,
    ArchiveFormatError,
    ArchiveRecord,
    AttackConfig,
    AttackNumericError,
    LogitEnsemble,
    UnknownAttackError,
    default_workers,
    read_archive,
    run_attack_set,
    verify_archive,
    write_archive,
)


class ConfigError(ValueError):
    """Run-config document failed validation."""


# schema: key -> (required, validator) where validator is a nested schema
# dict, a type tuple, or a callable
_TRAIN_SCHEMA = {
    "epochs": (True, (int,)),
    "lr": (True, (int, float)),
    "momentum": (True, (int, float)),
    "batch": (True, (int,)),
    "seed": (True, (int,)),
}
_MODEL_SCHEMA = {
    "name": (True, (str,)),
    "arch": (True, (str,)),
    "input": (True, (list,)),
    "classes": (True, (int,)),
    "train": (True, _TRAIN_SCHEMA),
    "checkpoint": (True, (str,)),
}
_SCHEMA = {
    "dataset": (
        True,
        {
            "source": (True, (str,)),
            "seed": (True, (int,)),
            "synth": (
                False,
                {
                    "n_train": (True, (int,)),
                    "n_test": (True, (int,)),
                    "size": (False, (int,)),
                    "style": (False, (str,)),
                    "noise": (False, (int, float)),
                    "clutter": (False, (int,)),
                },
            ),
            "idx": (
                False,
                {
                    "train_images": (True, (str,)),
                    "train_labels": (True, (str,)),
                    "test_images": (True, (str,)),
                    "test_labels": (True, (str,)),
                },
            ),
            "subset": (
                True,
                {
                    "n": (True, (int,)),
                    "seed": (True, (int,)),
                    "require_correct": (False, (bool,)),
                },
            ),
        },
    ),
    "models": (True, [_MODEL_SCHEMA]),
    "attack": (
        True,
        {
            "eps": (True, (int, float)),
            "steps": (True, (int,)),
            "step_size": (False, (int, float, type(None))),
            "decay": (True, (int, float)),
            "samples": (True, (int,)),
            "seed": (True, (int,)),
            "adjoint_grad": (False, (bool,)),
            "pixel_clamp": (False, (bool,)),
            "li": (
                True,
                {
                    "dist": (True, (str,)),
                    "k": (True, (int,)),
                    "offset_mode": (False, (str,)),
                },
            ),
            "bf": (False, {"grad_mode": (True, (str,))}),
            "dim": (False, {"resize_rate": (True, (int, float)), "prob": (True, (int, float))}),
        },
    ),
    "eval": (
        True,
        {
            "surrogate": (True, (str,)),
            "victims": (True, (list,)),
            "k": (True, (int,)),
            "asr_mode": (False, (str,)),
        },
    ),
    "output_dir": (True, (str,)),
}


def _validate(node, schema, path):
    if isinstance(schema, dict):
        if not isinstance(node, dict):
            raise ConfigError(f"{path}: expected an object")
        for key in node:
            if key not in schema:
                raise ConfigError(f"unknown config key {path}.{key}")
        for key, (required, sub) in schema.items():
            if key not in node:
                if required:
                    raise ConfigError(f"missing required config key {path}.{key}")
                continue
            _validate(node[key], sub, f"{path}.{key}")
    elif isinstance(schema, list):
        if not isinstance(node, list):
            raise ConfigError(f"{path}: expected a list")
        for idx, item in enumerate(node):
            _validate(item, schema[0], f"{path}[{idx}]")
    else:
        if not isinstance(node, schema):
            names = "/".join(t.__name__ for t in schema)
            raise ConfigError(f"{path}: expected {names}, got {type(node).__name__}")


def validate_config(cfg):
    _validate(cfg, _SCHEMA, "config")
    if not cfg["models"]:
        raise ConfigError("config.models: need at least one model")
    source = cfg["dataset"]["source"]
    if source not in ("synth", "idx"):
        raise ConfigError(f"config.dataset.source: unknown source {source!r}")
    if source == "synth" and "synth" not in cfg["dataset"]:
        raise ConfigError("config.dataset.synth is required when source is 'synth'")
    if source == "idx" and "idx" not in cfg["dataset"]:
        raise ConfigError("config.dataset.idx is required when source is 'idx'")
    names = [m["name"] for m in cfg["models"]]
    if len(set(names)) != len(names):
        raise ConfigError("config.models: duplicate model names")
    for role in [cfg["eval"]["surrogate"], *cfg["eval"]["victims"]]:
        if role not in names:
            raise ConfigError(f"config.eval references unknown model {role!r}")
    return cfg


def _parse_override(text):
    if "=" not in text:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return dotted.split("."), value


def load_config(path, overrides=()):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    for dotted in overrides:
        keys, value = _parse_override(dotted)
        node = cfg
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"--set path {'.'.join(keys)} does not exist in the config")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"--set path {'.'.join(keys)} does not exist in the config")
        node[keys[-1]] = value
    return validate_config(cfg)


def attack_config_from(cfg):
    a = cfg["attack"]
    try:
        return AttackConfig(
            eps=float(a["eps"]),
            steps=int(a["steps"]),
            step_size=None if a.get("step_size") is None else float(a["step_size"]),
            decay=float(a["decay"]),
            samples=int(a["samples"]),
            shift_bound=int(a["li"]["k"]),
            dist=a["li"]["dist"],
            offset_mode=a["li"].get("offset_mode", "ring"),
            adjoint_grad=a.get("adjoint_grad", True),
            pixel_clamp=a.get("pixel_clamp", True),
            asr_mode=cfg["eval"].get("asr_mode", "clean-pred-flip"),
            bf_grad_mode=a.get("bf", {}).get("grad_mode", "argmin"),
            dim_resize_rate=float(a.get("dim", {}).get("resize_rate", 1.1)),
            dim_prob=float(a.get("dim", {}).get("prob", 0.5)),
            seed=int(a["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(f"config.attack: {exc}") from None


def _attack_hash(cfg):
    acfg = attack_config_from(cfg)
    blob = json.dumps(asdict(acfg), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:8]


def _dirs(cfg):
    out = cfg["output_dir"]
    paths = {name: os.path.join(out, name) for name in ("checkpoints", "archives", "reports")}
    for p in paths.values():
        os.makedirs(p, exist_ok=True)
    return paths


def build_datasets(cfg):
    d = cfg["dataset"]
    if d["source"] == "synth":
        s = d["synth"]
        kwargs = {
            "size": s.get("size", 28),
            "style": s.get("style", "solid"),
            "noise": float(s.get("noise", 0.0)),
            "clutter": int(s.get("clutter", 0)),
        }
        train = datamod.synth_shapes(s["n_train"], d["seed"], **kwargs)
        test = datamod.synth_shapes(s["n_test"], d["seed"] + 1, split="test", **kwargs)
    else:
        i = d["idx"]
        train = datamod.load_idx(i["train_images"], i["train_labels"], split="train")
        test = datamod.load_idx(i["test_images"], i["test_labels"], split="test")
    return train, test


def _checkpoint_path(cfg, name):
    for m in cfg["models"]:
        if m["name"] == name:
            return os.path.join(_dirs(cfg)["checkpoints"], m["checkpoint"])
    raise ConfigError(f"config.models has no entry named {name!r}")


def cmd_train(cfg, out=sys.stdout):
    dirs = _dirs(cfg)
    train_set, test_set = build_datasets(cfg)
    rows = []
    for entry in cfg["models"]:
        spec = zoo.ModelSpec(entry["arch"], tuple(entry["input"]), entry["classes"])
        t = entry["train"]
        model = zoo.build(spec, t["seed"])
        _, trace = zoo.train(
            model, train_set, t["epochs"], t["lr"], t["momentum"], t["batch"], t["seed"],
            test_set=test_set,
        )
        path = os.path.join(dirs["checkpoints"], entry["checkpoint"])
        zoo.save(model, path)
        meta = {
            "seed": t["seed"],
            "epochs": t["epochs"],
            "final_train_acc": trace[-1]["train_acc"],
            "final_test_acc": trace[-1]["test_acc"],
        }
        with open(path + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        rows.append((entry["name"], trace[-1]["train_acc"], trace[-1]["test_acc"]))
    print(f"{'model':<12} {'train_acc':>9} {'test_acc':>8}", file=out)
    for name, tr_acc, te_acc in rows:
        print(f"{name:<12} {tr_acc:>9.3f} {te_acc:>8.3f}", file=out)
    return rows


def _load_eval_subset(cfg, surrogate_model):
    _, test_set = build_datasets(cfg)
    sub = cfg["dataset"]["subset"]
    model = surrogate_model if sub.get("require_correct", True) else None
    return datamod.attack_subset(test_set, sub["n"], sub["seed"], require_correct=model)


def _load_surrogate(cfg, paths):
    models = [zoo.load(p) for p in paths]
    return models[0] if len(models) == 1 else LogitEnsemble(models)


def cmd_attack(cfg, attack_name, surrogate_paths, out=sys.stdout):
    if attack_name not in ATTACKS:
        raise UnknownAttackError(
            f"unknown attack {attack_name!r}; registered: {', '.join(sorted(ATTACKS))}"
        )
    dirs = _dirs(cfg)
    acfg = attack_config_from(cfg)
    surrogate = _load_surrogate(cfg, surrogate_paths)
    eval_set = _load_eval_subset(cfg, surrogate)
    results = run_attack_set(attack_name, surrogate, eval_set, acfg)
    records = [
        ArchiveRecord(idx, acfg.eps, res.delta) for idx, res in enumerate(results)
    ]
    stem = f"{attack_name}_s{acfg.seed}_{_attack_hash(cfg)}"
    archive_path = os.path.join(dirs["archives"], stem + ".lipd")
    write_archive(archive_path, records)
    sidecar = {
        "attack": attack_name,
        "surrogates": list(surrogate_paths),
        "config": asdict(acfg),
        "examples": len(results),
        "forwards_total": sum(r.forwards for r in results),
        "backwards_total": sum(r.backwards for r in results),
        "forwards_per_example": results[0].forwards if results else 0,
        "backwards_per_example": results[0].backwards if results else 0,
    }
    with open(archive_path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {archive_path} ({len(records)} perturbations)", file=out)
    return archive_path


def _read_archive_for_eval(cfg, archive_path, eval_set):
    records = read_archive(archive_path)
    if len(records) != len(eval_set) or [r.index for r in records] != list(range(len(eval_set))):
        raise ArchiveFormatError(
            f"{archive_path}: holds {len(records)} records; eval subset has "
            f"{len(eval_set)} examples with indices 0..{len(eval_set) - 1}"
        )
    with open(archive_path + ".json") as fh:
        sidecar = json.load(fh)
    return sidecar["attack"], [r.delta for r in records]


def _eval_models(cfg):
    surrogate_name = cfg["eval"]["surrogate"]
    models = {surrogate_name: zoo.load(_checkpoint_path(cfg, surrogate_name))}
    for name in cfg["eval"]["victims"]:
        if name not in models:
            models[name] = zoo.load(_checkpoint_path(cfg, name))
    return surrogate_name, models


def cmd_eval_transfer(cfg, archive_paths, out=sys.stdout):
    dirs = _dirs(cfg)
    surrogate_name, models = _eval_models(cfg)
    eval_set = _load_eval_subset(cfg, models[surrogate_name])
    asr_mode = cfg["eval"].get("asr_mode", "clean-pred-flip")
    victim_names = [surrogate_name] + [v for v in cfg["eval"]["victims"] if v != surrogate_name]
    attack_names, rows = [], []
    for path in archive_paths:
        attack_name, deltas = _read_archive_for_eval(cfg, path, eval_set)
        attack_names.append(attack_name)
        rows.append(
            [
                evalsuite.attack_success_rate(models[v], eval_set, deltas, asr_mode)
                for v in victim_names
            ]
        )
    matrix = evalsuite.TransferMatrix(
        attack_names, victim_names, np.asarray(rows), surrogate_name, eval_set.split
    )
    report = os.path.join(dirs["reports"], f"transfer_{_attack_hash(cfg)}.csv")
    evalsuite.write_transfer_csv(report, matrix)
    print(f"wrote {report}", file=out)
    return matrix, report


def cmd_eval_invariance(cfg, archive_paths, out=sys.stdout):
    dirs = _dirs(cfg)
    surrogate_name, models = _eval_models(cfg)
    eval_set = _load_eval_subset(cfg, models[surrogate_name])
    asr_mode = cfg["eval"].get("asr_mode", "clean-pred-flip")
    k = cfg["eval"]["k"]
    victims = [v for v in cfg["eval"]["victims"] if v != surrogate_name]
    records = []
    for path in archive_paths:
        attack_name, deltas = _read_archive_for_eval(cfg, path, eval_set)
        inv = float(evalsuite.mean_local_invariance(models[surrogate_name], eval_set, deltas, k))
        victim_asr = float(
            np.mean(
                [
                    evalsuite.attack_success_rate(models[v], eval_set, deltas, asr_mode)
                    for v in victims
                ]
            )
        )
        records.append(
            evalsuite.InvarianceRecord(attack_name, surrogate_name, k, inv, victim_asr)
        )
    stem = _attack_hash(cfg)
    report = os.path.join(dirs["reports"], f"invariance_{stem}.csv")
    evalsuite.write_invariance_csv(report, records)
    print(f"wrote {report}", file=out)
    correlation = None
    if len(records) >= 3:
        corr_path = os.path.join(dirs["reports"], f"correlation_{stem}.json")
        correlation = evalsuite.write_correlation_json(corr_path, records)
        print(f"wrote {corr_path} (pearson_r={correlation:.4f})", file=out)
    return records, correlation


def cmd_sweep(cfg, attack_name, param, values, out=sys.stdout):
    if attack_name not in ATTACKS:
        raise UnknownAttackError(
            f"unknown attack {attack_name!r}; registered: {', '.join(sorted(ATTACKS))}"
        )
    if param not in ("k", "N"):
        raise ConfigError(f"sweep parameter must be 'k' or 'N', got {param!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if any(v < 0 for v in values) or (param == "N" and any(v < 1 for v in values)):
        raise ConfigError(f"sweep values must be positive, got {values}")
    dirs = _dirs(cfg)
    surrogate_name, models = _eval_models(cfg)
    surrogate = models[surrogate_name]
    eval_set = _load_eval_subset(cfg, surrogate)
    asr_mode = cfg["eval"].get("asr_mode", "clean-pred-flip")
    victims = [v for v in cfg["eval"]["victims"] if v != surrogate_name]
    base = attack_config_from(cfg)
    rows = []
    for value in values:
        if param == "k":
            acfg = AttackConfig(**{**asdict(base), "shift_bound": int(value)})
        else:
            acfg = AttackConfig(**{**asdict(base), "samples": int(value)})
        results = run_attack_set(attack_name, surrogate, eval_set, acfg)
        deltas = [r.delta for r in results]
        wb = evalsuite.attack_success_rate(surrogate, eval_set, deltas, asr_mode)
        victim_asr = float(
            np.mean(
                [
                    evalsuite.attack_success_rate(models[v], eval_set, deltas, asr_mode)
                    for v in victims
                ]
            )
        )
        inv = float(
            evalsuite.mean_local_invariance(surrogate, eval_set, deltas, cfg["eval"]["k"])
        )
        rows.append(
            {
                "param": param,
                "value": value,
                "white_box_asr": wb,
                "mean_victim_asr": victim_asr,
                "mean_invariance": inv,
                "forwards_per_example": results[0].forwards,
                "backwards_per_example": results[0].backwards,
            }
        )
    report = os.path.join(dirs["reports"], f"sweep_{attack_name}_{param}.csv")
    with open(report, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"wrote {report}", file=out)
    return rows, report


def cmd_report(cfg, out=sys.stdout):
    reports = _dirs(cfg)["reports"]
    found = sorted(os.listdir(reports))
    if not found:
        print("no reports yet; run eval-transfer / eval-invariance / sweep first", file=out)
        return []
    for name in found:
        path = os.path.join(reports, name)
        print(f"== {name}", file=out)
        if name.endswith(".csv"):
            with open(path) as fh:
                for line in fh:
                    print("  " + line.rstrip(), file=out)
        elif name.endswith(".json"):
            with open(path) as fh:
                doc = json.load(fh)
            print(f"  pearson_r={doc['pearson_r']:.4f} over n={doc['n']} attacks", file=out)
        print("", file=out)
    return found


def cmd_verify(cfg, archive_paths, out=sys.stdout):
    surrogate_name, models = _eval_models(cfg)
    eval_set = _load_eval_subset(cfg, models[surrogate_name])
    all_problems = []
    for path in archive_paths:
        problems = verify_archive(read_archive(path), images=eval_set.images)
        status = "ok" if not problems else f"{len(problems)} violations"
        print(f"{path}: {status}", file=out)
        for p in problems:
            print(f"  {p}", file=out)
        all_problems.extend(problems)
    return all_problems


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="liboost",
        description="train small classifiers, generate perturbation archives, "
        "and evaluate their transfer and translation robustness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run-config JSON path")
        p.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override a config value (JSON literal or string)",
        )

    common(sub.add_parser("train", help="train and checkpoint every configured model"))
    p = sub.add_parser("attack", help="generate a perturbation archive")
    common(p)
    p.add_argument("--attack", required=True, help="registered attack name")
    p.add_argument(
        "--surrogate", action="append", required=True,
        help="surrogate checkpoint path; repeat for a fused ensemble",
    )
    p = sub.add_parser("eval-transfer", help="score archives against every victim")
    common(p)
    p.add_argument("--archive", action="append", required=True)
    p = sub.add_parser("eval-invariance", help="local invariance and victim ASR per archive")
    common(p)
    p.add_argument("--archive", action="append", required=True)
    p = sub.add_parser("sweep", help="rerun an attack across k or N values")
    common(p)
    p.add_argument("--attack", required=True)
    p.add_argument("--param", required=True, choices=["k", "N"])
    p.add_argument("--values", required=True, help="comma-separated integers")
    p = sub.add_parser("verify", help="check archive budget invariants")
    common(p)
    p.add_argument("--archive", action="append", required=True)
    common(sub.add_parser("report", help="print all reports in the output directory"))
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "attack":
            cmd_attack(cfg, args.attack, args.surrogate)
        elif args.command == "eval-transfer":
            cmd_eval_transfer(cfg, args.archive)
        elif args.command == "eval-invariance":
            cmd_eval_invariance(cfg, args.archive)
        elif args.command == "sweep":
            values = [int(v) for v in args.values.split(",") if v.strip()]
            cmd_sweep(cfg, args.attack, args.param, values)
        elif args.command == "verify":
            if cmd_verify(cfg, args.archive):
                return 4
        elif args.command == "report":
            cmd_report(cfg)
        return 0
    except (ConfigError, UnknownAttackError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (zoo.TrainingError, AttackNumericError, ts.NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (
        datamod.IdxFormatError,
        zoo.CheckpointFormatError,
        ArchiveFormatError,
        evalsuite.EvalInputError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
