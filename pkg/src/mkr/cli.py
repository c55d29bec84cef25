"""Command-line entry point: preprocess, train, eval, sweep, verify.

Every run writes a ``manifest.txt`` (flat key=value: command, version, seed,
resolved config, input hashes) next to its outputs, enough to replay the
run bit-exactly. Config files use the same flat key=value format; explicit
command-line flags override file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .data import DatasetBundle, generate_synthetic, preprocess, subsample_kg_training, subsample_training
from .errors import ContractError, DataError, TrainingDivergedError, UsageError
from .evaluation import metric_report
from .model import HyperParams, MkrModel
from .theory import run_verification
from .training import train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3
EXIT_DIVERGED = 4

_HP_FIELDS = {f.name: f.type for f in dataclasses.fields(HyperParams)}
_CONFIG_KEYS = set(_HP_FIELDS) | {"seed", "bundle", "out", "checkpoint", "ks",
                                  "axis", "values", "seeds_per_cell"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_bool(value: str) -> bool:
    low = value.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"cannot parse boolean value {value!r}")


def read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = stripped.split("=", 1)
            key = key.strip()
            if key not in _CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value.strip()
    return values


def resolve_hyperparams(config: dict[str, str], overrides: dict) -> HyperParams:
    """Defaults <- config file <- explicit CLI flags, with type coercion."""
    merged = dataclasses.asdict(HyperParams())
    for key, raw in config.items():
        if key not in _HP_FIELDS:
            continue
        current = merged[key]
        if isinstance(current, bool):
            merged[key] = _parse_bool(raw)
        elif isinstance(current, int):
            merged[key] = int(raw)
        elif isinstance(current, float):
            merged[key] = float(raw)
        else:
            merged[key] = raw
    for key, value in overrides.items():
        if value is not None and key in _HP_FIELDS:
            merged[key] = value
    hp = HyperParams.from_dict(merged)
    hp.validate()
    return hp


def _hash_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_inputs(paths: dict[str, str]) -> dict[str, str]:
    out = {}
    for label, path in paths.items():
        if os.path.isdir(path):
            for name in sorted(os.listdir(path)):
                full = os.path.join(path, name)
                if os.path.isfile(full):
                    out[f"{label}.{name}"] = _hash_file(full)
        elif os.path.isfile(path):
            out[label] = _hash_file(path)
    return out


def write_manifest(out_dir: str, command: str, settings: dict,
                   inputs: dict[str, str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = {"command": command, "version": __version__}
    lines.update({str(k): str(v) for k, v in settings.items()})
    lines.update({f"sha256.{k}": v for k, v in _hash_inputs(inputs).items()})
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        for key in sorted(lines):
            fh.write(f"{key}={lines[key]}\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    if args.synthetic:
        bundle = generate_synthetic(
            args.users, args.items, args.entities, args.relations,
            rho=args.rho, seed=args.seed,
            pos_per_user=args.pos_per_user,
            triples_per_entity=args.triples_per_entity)
        inputs: dict[str, str] = {}
        settings = {
            "mode": "synthetic", "seed": args.seed, "users": args.users,
            "items": args.items, "entities": args.entities,
            "relations": args.relations, "rho": args.rho,
            "pos_per_user": args.pos_per_user,
            "triples_per_entity": args.triples_per_entity,
        }
    else:
        for flag, value in (("--interactions", args.interactions),
                            ("--kg", args.kg), ("--alignment", args.alignment)):
            if not value:
                raise UsageError(f"{flag} is required unless --synthetic is given")
        bundle = preprocess(args.interactions, args.kg, args.alignment,
                            threshold=args.threshold, seed=args.seed)
        inputs = {"interactions": args.interactions, "kg": args.kg,
                  "alignment": args.alignment}
        settings = {"mode": "files", "seed": args.seed, "threshold": args.threshold}
    bundle.save(args.out)
    write_manifest(args.out, "preprocess", settings, inputs)
    counts = (f"{bundle.n_users} users, {bundle.n_items} items, "
              f"{len(bundle.users)} interactions, {len(bundle.heads)} triples")
    print(f"wrote bundle to {args.out} ({counts})")
    return EXIT_OK


def _hp_overrides(args) -> dict:
    return {name: getattr(args, name, None) for name in _HP_FIELDS}


def cmd_train(args) -> int:
    config = read_config_file(args.config) if args.config else {}
    hp = resolve_hyperparams(config, _hp_overrides(args))
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    bundle_dir = args.bundle or config.get("bundle")
    if not bundle_dir:
        raise UsageError("--bundle (or bundle= in the config) is required")
    bundle = DatasetBundle.load(bundle_dir)
    result = train(bundle, hp, seed)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "model.ckpt")
    result.model.save(ckpt_path)
    with open(os.path.join(args.out, "train_log.jsonl"), "w", encoding="utf-8") as fh:
        for row in result.log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    settings = {"seed": seed, "bundle": bundle_dir, **hp.to_dict()}
    write_manifest(args.out, "train", settings, {"bundle": bundle_dir})
    print(f"best epoch {result.best_epoch}: validation AUC {result.best_val_auc:.4f}; "
          f"checkpoint at {ckpt_path}")
    return EXIT_OK


def _parse_ks(raw: str | None) -> list[int]:
    if not raw:
        return []
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"bad K list {raw!r}: {exc}") from exc


def cmd_eval(args) -> int:
    bundle = DatasetBundle.load(args.bundle)
    model = MkrModel.load(args.checkpoint, alignment=bundle.alignment)
    if (model.n_users, model.n_items, model.n_entities, model.n_relations) != (
            bundle.n_users, bundle.n_items, bundle.n_entities, bundle.n_relations):
        raise DataError("checkpoint and bundle disagree on id-space sizes")
    report = metric_report(model, bundle, ks=_parse_ks(args.ks))
    payload = report.to_json()
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        write_manifest(os.path.dirname(args.out) or ".", "eval",
                       {"checkpoint": args.checkpoint, "bundle": args.bundle,
                        "ks": args.ks or ""},
                       {"bundle": args.bundle, "checkpoint": args.checkpoint})
    else:
        print(payload)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("metric,k,value\n")
            for metric, k, value in report.to_csv_rows():
                fh.write(f"{metric},{k},{value}\n")
    return EXIT_OK


_SWEEP_AXES = ("rs_passes", "dim", "kg_ratio", "train_ratio")


def cmd_sweep(args) -> int:
    config = read_config_file(args.config) if args.config else {}
    base_hp = resolve_hyperparams(config, _hp_overrides(args))
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    bundle_dir = args.bundle or config.get("bundle")
    if not bundle_dir:
        raise UsageError("--bundle (or bundle= in the config) is required")
    axis = args.axis or config.get("axis")
    if axis not in _SWEEP_AXES:
        raise UsageError(f"--axis must be one of {_SWEEP_AXES}, got {axis!r}")
    raw_values = args.values or config.get("values")
    if not raw_values:
        raise UsageError("--values is required")
    values = [float(v) for v in str(raw_values).split(",") if v.strip()]
    seeds_per_cell = args.seeds_per_cell or int(config.get("seeds_per_cell", 3))

    bundle = DatasetBundle.load(bundle_dir)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    write_manifest(args.out, "sweep",
                   {"axis": axis, "values": raw_values, "seed": seed,
                    "seeds_per_cell": seeds_per_cell, "bundle": bundle_dir,
                    **base_hp.to_dict()},
                   {"bundle": bundle_dir})
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("axis,value,seeds,auc_mean,acc_mean\n")
        fh.flush()
        for value in values:
            hp = HyperParams.from_dict(base_hp.to_dict())
            cell_bundle = bundle
            if axis == "rs_passes":
                hp.rs_passes = int(value)
            elif axis == "dim":
                hp.dim = int(value)
            elif axis == "kg_ratio":
                cell_bundle = subsample_kg_training(bundle, value, seed)
            elif axis == "train_ratio":
                cell_bundle = subsample_training(bundle, value, seed)
            aucs, accs = [], []
            for rep in range(seeds_per_cell):
                result = train(cell_bundle, hp, seed + rep)
                report = metric_report(result.model, cell_bundle, ks=())
                aucs.append(report.auc)
                accs.append(report.acc)
            fh.write(f"{axis},{value:g},{seeds_per_cell},"
                     f"{np.mean(aucs):.6f},{np.mean(accs):.6f}\n")
            fh.flush()
            print(f"{axis}={value:g}: AUC {np.mean(aucs):.4f} ACC {np.mean(accs):.4f}")
    print(f"sweep results in {csv_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    reports = run_verification(seed=args.seed, trials=args.trials)
    failed = False
    for report in reports:
        print(json.dumps(report, sort_keys=True, default=str))
        failed = failed or report.get("status") != "pass"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(reports, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _add_hyperparam_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dim", type=int, help="embedding/hidden width")
    parser.add_argument("--low-layers", dest="low_layers", type=int,
                        help="shared-layer depth")
    parser.add_argument("--high-layers", dest="high_layers", type=int,
                        help="tail-predictor depth")
    parser.add_argument("--rs-passes", dest="rs_passes", type=int,
                        help="recommender passes per KG pass")
    parser.add_argument("--kg-weight", dest="kg_weight", type=float)
    parser.add_argument("--l2-weight", dest="l2_weight", type=float)
    parser.add_argument("--rs-mlp-layers", dest="rs_mlp_layers", type=int)
    parser.add_argument("--batch-size-rs", dest="batch_size_rs", type=int)
    parser.add_argument("--batch-size-kg", dest="batch_size_kg", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--variant", choices=("full", "dcn", "stitch"))
    parser.add_argument("--rs-head", dest="rs_head",
                        choices=("inner_product", "mlp"))
    parser.add_argument("--tasks", choices=("joint", "rs_only", "kge_only"))
    parser.add_argument("--no-cross-unit", dest="use_cross_unit",
                        action="store_false", default=None,
                        help="replace shared layers with private dense towers")


def build_parser() -> _Parser:
    parser = _Parser(prog="mkr", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build a processed bundle directory")
    p.add_argument("--interactions")
    p.add_argument("--kg")
    p.add_argument("--alignment")
    p.add_argument("--threshold", type=float, default=None,
                   help="positive-rating threshold; omit to take all rows as positive")
    p.add_argument("--synthetic", action="store_true",
                   help="generate a planted-factor dataset instead of reading files")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--entities", type=int, default=500)
    p.add_argument("--relations", type=int, default=4)
    p.add_argument("--rho", type=float, default=0.9,
                   help="item/entity latent correlation of the synthetic set")
    p.add_argument("--pos-per-user", dest="pos_per_user", type=int, default=12)
    p.add_argument("--triples-per-entity", dest="triples_per_entity", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a processed bundle")
    p.add_argument("--bundle")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_hyperparam_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a bundle's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--ks", default="",
                   help="comma-separated K values for top-K metrics")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--csv", help="also write a CSV report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train+eval across one hyperparameter axis")
    p.add_argument("--bundle")
    p.add_argument("--config")
    p.add_argument("--axis", choices=_SWEEP_AXES)
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--seeds-per-cell", dest="seeds_per_cell", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_hyperparam_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the theory verification battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--out", help="also write the JSON report array here")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
