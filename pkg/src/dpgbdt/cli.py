"""Command-line interface.

Subcommands:
  train    one configuration -> model JSON plus metrics on stdout
  grid     grid spec file -> incremental results CSV (+ summary and sidecar)
  presets  list the built-in baseline configurations
  account  query ledger, calibrated sigma, and communication costs, no training

Configuration files are plain ``key = value`` lines (# comments allowed);
every TrainConfig field can also be set by a flag of the same name, which
wins over the file. Exit code 0 on success; failures print one JSON error
line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

from .accounting import PrivacyBudget, calibrate_sigma, count_queries
from .boosting import predict, train
from .config import TrainConfig
from .data import load_csv, train_test_split
from .federation import ONE_RECORD_PER_CLIENT, comm_accounting, partition
from .gradients import query_sensitivity
from .harness import auc_roc, baseline_preset, budget_for, list_presets, run_grid

_CONFIG_FIELDS = {
    "T": int,
    "d": int,
    "Q": int,
    "split_method": str,
    "update_mode": str,
    "candidate_method": str,
    "ih_rounds": int,
    "feature_mode": str,
    "k": int,
    "B": int,
    "eta": float,
    "beta": float,
    "lam": float,
    "gamma": float,
    "seed": int,
    "m": int,
    "centered_batch": lambda s: s.lower() in ("1", "true", "yes"),
    "noise_placement": str,
    "epsilon": float,
    "delta": float,
    "name": str,
}


def _parse_kv_file(path: str) -> dict:
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def _coerce(key: str, value):
    if value is None:
        return None
    if key not in _CONFIG_FIELDS:
        raise ValueError(f"unknown config field: {key!r}")
    if isinstance(value, str):
        return _CONFIG_FIELDS[key](value)
    return value


def _merged_values(args, file_values: dict) -> dict:
    flat: dict = {}
    for key in _CONFIG_FIELDS:
        if key in file_values:
            flat[key] = _coerce(key, file_values[key])
        flag = getattr(args, key, None)
        if flag is not None:
            flat[key] = _coerce(key, flag)
    return flat


_PRESET_KWARGS = ("T", "d", "Q", "ih_rounds", "eta", "beta", "lam", "gamma", "seed", "m")


def _config_from(args, file_values: dict) -> tuple[TrainConfig, float | None, float | None]:
    """Build a config from file + flags; the (epsilon, delta) pair is returned
    separately so callers can default delta to 1/n once n is known.

    With --preset, the named baseline supplies the defaults and any explicit
    key overrides it field by field.
    """
    flat = _merged_values(args, file_values)
    epsilon = flat.pop("epsilon", None)
    delta = flat.pop("delta", None)
    preset = getattr(args, "preset", None)
    if preset:
        base = baseline_preset(
            preset, **{k: flat[k] for k in _PRESET_KWARGS if k in flat}
        )
        merged = base.to_flat_dict()
        merged.update(flat)
        return TrainConfig.from_flat_dict(merged), epsilon, delta
    return TrainConfig.from_flat_dict(flat), epsilon, delta


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--preset", help="baseline preset name, e.g. DP-TR-Newton")
    for key in _CONFIG_FIELDS:
        # raw strings here; _coerce applies the field's parser so file values
        # and flag values go through one code path
        parser.add_argument(f"--{key}", type=str, default=None)


def _cmd_train(args) -> int:
    file_values = _parse_kv_file(args.config) if args.config else {}
    cfg, epsilon, delta = _config_from(args, file_values)
    bounds = json.loads(args.bounds) if args.bounds else None
    dataset = load_csv(args.data, args.label_column, bounds)
    if args.test_fraction > 0:
        pair = train_test_split(dataset, 1.0 - args.test_fraction, seed=args.split_seed)
        train_set, test_set = pair.train, pair.test
    else:
        train_set, test_set = dataset, None
    if epsilon is not None:
        # delta defaults to 1/n when not given explicitly
        budget = (
            PrivacyBudget(epsilon, delta) if delta is not None else budget_for(epsilon, train_set.n)
        )
        cfg = cfg.with_budget(budget)
    pop = partition(train_set, None, ONE_RECORD_PER_CLIENT, seed=cfg.seed)
    result = train(cfg, pop)
    if args.out:
        result.ensemble.save(args.out)
    metrics = {
        "sigma": result.sigma,
        "queries": result.queries.as_tuple(),
        "comm_rounds": result.comm_rounds,
        "comm_uplink_values": result.comm_uplink_values,
        "nonprivate_candidates": result.nonprivate_candidates,
        "train_auc": auc_roc(train_set.labels, predict(result.ensemble, train_set.features)),
    }
    if test_set is not None:
        metrics["test_auc"] = auc_roc(test_set.labels, predict(result.ensemble, test_set.features))
    print(json.dumps(metrics, indent=2))
    return 0


def _parse_list(text: str, cast):
    return [cast(part.strip()) for part in text.split(",") if part.strip()]


def _cmd_grid(args) -> int:
    spec = _parse_kv_file(args.spec)
    dataset_kind = spec.pop("dataset", "synthetic")
    dataset_spec: dict = {"kind": dataset_kind}
    for key in ("n", "m", "seed"):
        if key in spec:
            dataset_spec[key] = int(spec.pop(key))
    for key in ("skewed_fraction", "class_balance"):
        if key in spec:
            dataset_spec[key] = float(spec.pop(key))
    for key in ("path", "label_column", "name"):
        if key in spec:
            dataset_spec[key] = spec.pop(key)

    preset_names = _parse_list(spec.pop("presets"), str)
    epsilons = [None if e in ("none", "None") else float(e) for e in _parse_list(spec.pop("epsilons"), str)]
    split_seeds = _parse_list(spec.pop("split_seeds", "0"), int)
    repeats = int(spec.pop("repeats", "1"))
    test_fraction = float(spec.pop("test_fraction", "0.3"))
    preset_kwargs = {
        key: _coerce(key, value)
        for key, value in spec.items()
        if key in ("T", "d", "Q", "ih_rounds", "eta", "beta", "lam", "gamma", "seed")
    }
    configs = {name: baseline_preset(name, **preset_kwargs) for name in preset_names}
    results = run_grid(
        configs, dataset_spec, epsilons, split_seeds, repeats, args.out, test_fraction
    )
    failures = sum(1 for r in results if r.status != "ok")
    print(f"wrote {len(results)} new rows to {args.out} ({failures} failures)")
    return 0


def _cmd_presets(_args) -> int:
    for row in list_presets():
        kappa = row["kappa"]
        print(
            f"{row['name']:<36} split={row['split_method']:<5} update={row['update_mode']:<9} "
            f"candidates={row['candidate_method']:<8} k={row['k']:<3} B={row['B']:<4} "
            f"kappa=(c={kappa[0]}, s={kappa[1]}, w={kappa[2]})"
        )
    return 0


def _cmd_account(args) -> int:
    file_values = _parse_kv_file(args.config) if args.config else {}
    cfg, epsilon, delta = _config_from(args, file_values)
    if epsilon is not None:
        if delta is None:
            raise ValueError("account needs --delta alongside --epsilon (no dataset to infer 1/n)")
        cfg = cfg.with_budget(PrivacyBudget(epsilon, delta))
    if cfg.m is None:
        raise ValueError("account needs --m (number of features)")
    counter = count_queries(cfg)
    out = {
        "kappa_c": counter.kappa_c,
        "kappa_s": counter.kappa_s,
        "kappa_w": counter.kappa_w,
        "total_queries": counter.total,
    }
    if cfg.budget is not None:
        sigma = calibrate_sigma(cfg.budget, counter)
        out["sigma"] = sigma
        out["noise_std"] = sigma * query_sensitivity(cfg.update_mode)
    ledger = comm_accounting(cfg)
    out["comm"] = {
        "rounds": ledger.rounds,
        "per_round_payload": ledger.per_round_payload,
        "uplink_values": ledger.uplink_values,
        "uplink_bytes": ledger.uplink_bytes,
        "secure_agg_round_factor": ledger.secure_agg_round_factor,
    }
    print(json.dumps(out, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpgbdt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one configuration on a CSV dataset")
    p_train.add_argument("--data", required=True, help="CSV with header row")
    p_train.add_argument("--label-column", required=True)
    p_train.add_argument("--bounds", help="JSON list of [low, high] per feature column")
    p_train.add_argument("--out", help="path for the model JSON")
    p_train.add_argument("--test-fraction", type=float, default=0.3)
    p_train.add_argument("--split-seed", type=int, default=0)
    _add_config_flags(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_grid = sub.add_parser("grid", help="run an experiment grid from a spec file")
    p_grid.add_argument("--spec", required=True)
    p_grid.add_argument("--out", required=True)
    p_grid.set_defaults(func=_cmd_grid)

    p_presets = sub.add_parser("presets", help="list baseline presets")
    p_presets.set_defaults(func=_cmd_presets)

    p_account = sub.add_parser(
        "account", help="query counts, calibrated sigma, and comm costs for a config"
    )
    _add_config_flags(p_account)
    p_account.set_defaults(func=_cmd_account)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
