"""Experiment harness: baseline presets, AUC evaluation, grid runs, rankings.

Baselines are expressed as configurations of the same trainer so their query
ledgers and noise calibration are directly comparable:

  DP-EBM                  tr splits, gradient updates, cyclical single-feature trees
  DP-EBM-Newton           as DP-EBM with newton updates
  DP-GBM                  hist splits, gradient updates, all features
  DP-RF                   tr splits, averaging updates, one batch (B = T)
  FEVERLESS               hist splits, newton updates, uniform candidates
  LDP                     tr + newton with per-client (local) noise
  DP-TR-Newton            tr splits, newton updates, uniform candidates
  DP-TR-Newton-IH         adds iterative-Hessian candidate refinement
  DP-TR-Newton-IH-EBM     adds cyclical single-feature trees
  DP-TR-Batch-Newton-IH-EBM(p)  adds batched updates with B = round(p * T)

DP-EBM here trains T trees cycling one feature per tree; a run equivalent to
T_outer full feature cycles uses T = T_outer * m.
"""

from __future__ import annotations

import csv
import json
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .accounting import InvalidParameterError, PrivacyBudget, QueryCounter, count_queries
from .boosting import predict, train
from .config import CandidateMethod, FeatureMode, NoisePlacement, TrainConfig
from .data import Dataset, load_csv, synthesize, train_test_split
from .federation import ONE_RECORD_PER_CLIENT, CommLedger, comm_accounting, partition
from .gradients import UpdateMode
from .trees import SplitMethod

__all__ = [
    "UndefinedAucError",
    "UnknownPresetError",
    "MissingCellError",
    "auc_roc",
    "budget_for",
    "PRESET_NAMES",
    "baseline_preset",
    "list_presets",
    "ExperimentResult",
    "run_single",
    "run_grid",
    "rank_table",
    "RESULT_COLUMNS",
]


class UndefinedAucError(ValueError):
    """AUC is undefined when only one class is present."""


class UnknownPresetError(KeyError):
    pass


class MissingCellError(ValueError):
    """Ranking requires every method to cover every (dataset, epsilon) cell."""


def auc_roc(labels, scores) -> float:
    """Probability that a random positive outranks a random negative.

    Mann-Whitney form via average ranks; tied scores count one half.
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape or y.ndim != 1:
        raise InvalidParameterError("labels and scores must be aligned vectors")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("both classes must be present to compute AUC")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def budget_for(epsilon: float, n: int) -> PrivacyBudget:
    """Budget with the conventional delta = 1/n."""
    return PrivacyBudget(epsilon, 1.0 / n)


_BATCH_PRESET = re.compile(r"^DP-TR-Batch-Newton-IH-EBM\(p=([0-9.]+)\)$")

PRESET_NAMES: tuple[str, ...] = (
    "DP-EBM",
    "DP-EBM-Newton",
    "DP-GBM",
    "DP-RF",
    "FEVERLESS",
    "LDP",
    "DP-TR-Newton",
    "DP-TR-Newton-IH",
    "DP-TR-Newton-IH-EBM",
    "DP-TR-Batch-Newton-IH-EBM(p=0.25)",
)


def baseline_preset(
    name: str,
    *,
    T: int = 100,
    d: int = 4,
    Q: int = 32,
    ih_rounds: int = 5,
    eta: float = 0.3,
    beta: float = 2.0,
    lam: float = 1.0,
    gamma: float = 0.0,
    seed: int = 0,
    m: int | None = None,
) -> TrainConfig:
    """Build the configuration of a named baseline.

    The batched preset takes its fraction inline, e.g.
    ``DP-TR-Batch-Newton-IH-EBM(p=0.25)``.
    """
    base = dict(
        T=T, d=d, Q=Q, ih_rounds=ih_rounds, eta=eta, beta=beta, lam=lam, gamma=gamma,
        seed=seed, m=m, name=name,
    )
    match = _BATCH_PRESET.match(name)
    if match:
        p = float(match.group(1))
        if not 0.0 < p <= 1.0:
            raise UnknownPresetError(f"batch fraction must be in (0, 1], got {p}")
        return TrainConfig(
            split_method=SplitMethod.TOTALLY_RANDOM,
            update_mode=UpdateMode.NEWTON,
            candidate_method=CandidateMethod.ITERATIVE_HESSIAN,
            feature_mode=FeatureMode.CYCLICAL,
            k=1,
            B=max(1, min(T, round(p * T))),
            **base,
        )
    table = {
        "DP-EBM": dict(
            split_method=SplitMethod.TOTALLY_RANDOM,
            update_mode=UpdateMode.GRADIENT,
            candidate_method=CandidateMethod.UNIFORM,
            feature_mode=FeatureMode.CYCLICAL,
            k=1,
        ),
        "DP-EBM-Newton": dict(
            split_method=SplitMethod.TOTALLY_RANDOM,
            update_mode=UpdateMode.NEWTON,
            candidate_method=CandidateMethod.UNIFORM,
            feature_mode=FeatureMode.CYCLICAL,
            k=1,
        ),
        "DP-GBM": dict(
            split_method=SplitMethod.HIST,
            update_mode=UpdateMode.GRADIENT,
            candidate_method=CandidateMethod.UNIFORM,
        ),
        "DP-RF": dict(
            split_method=SplitMethod.TOTALLY_RANDOM,
            update_mode=UpdateMode.AVERAGING,
            candidate_method=CandidateMethod.UNIFORM,
            B=T,
        ),
        "FEVERLESS": dict(
            split_method=SplitMethod.HIST,
            update_mode=UpdateMode.NEWTON,
            candidate_method=CandidateMethod.UNIFORM,
        ),
        "LDP": dict(
            split_method=SplitMethod.TOTALLY_RANDOM,
            update_mode=UpdateMode.NEWTON,
            candidate_method=CandidateMethod.UNIFORM,
            noise_placement=NoisePlacement.LOCAL,
        ),
        "DP-TR-Newton": dict(
            split_method=SplitMethod.TOTALLY_RANDOM,
            update_mode=UpdateMode.NEWTON,
            candidate_method=CandidateMethod.UNIFORM,
        ),
        "DP-TR-Newton-IH": dict(
            split_method=SplitMethod.TOTALLY_RANDOM,
            update_mode=UpdateMode.NEWTON,
            candidate_method=CandidateMethod.ITERATIVE_HESSIAN,
        ),
        "DP-TR-Newton-IH-EBM": dict(
            split_method=SplitMethod.TOTALLY_RANDOM,
            update_mode=UpdateMode.NEWTON,
            candidate_method=CandidateMethod.ITERATIVE_HESSIAN,
            feature_mode=FeatureMode.CYCLICAL,
            k=1,
        ),
    }
    if name not in table:
        raise UnknownPresetError(
            f"unknown preset {name!r}; known: {', '.join(PRESET_NAMES)}"
        )
    return TrainConfig(**table[name], **base)


def list_presets(T: int = 100, m: int = 10, d: int = 4) -> list[dict]:
    """Name, component summary, and query-count formula of every preset."""
    rows = []
    for name in PRESET_NAMES:
        cfg = baseline_preset(name, T=T, d=d, m=m)
        kappa = count_queries(cfg)
        rows.append(
            {
                "name": name,
                "split_method": cfg.split_method.value,
                "update_mode": cfg.update_mode.value,
                "candidate_method": cfg.candidate_method.value,
                "k": cfg.resolved_k(),
                "B": cfg.B,
                "kappa": kappa.as_tuple(),
                "total_queries": kappa.total,
            }
        )
    return rows


RESULT_COLUMNS = [
    "config_id",
    "dataset",
    "epsilon",
    "split_seed",
    "repeat",
    "status",
    "test_auc",
    "train_auc",
    "sigma",
    "kappa_c",
    "kappa_s",
    "kappa_w",
    "comm_rounds",
    "comm_uplink_values",
    "wall_time",
    "error",
]


@dataclass
class ExperimentResult:
    """One grid cell's outcome; failed runs carry an error string instead of metrics."""

    config_id: str
    dataset: str
    epsilon: float | None
    split_seed: int
    repeat: int
    status: str = "ok"
    test_auc: float | None = None
    train_auc: float | None = None
    sigma: float | None = None
    queries: QueryCounter | None = None
    comm: CommLedger | None = None
    wall_time: float = 0.0
    error: str | None = None

    def to_row(self) -> dict:
        return {
            "config_id": self.config_id,
            "dataset": self.dataset,
            "epsilon": "" if self.epsilon is None else self.epsilon,
            "split_seed": self.split_seed,
            "repeat": self.repeat,
            "status": self.status,
            "test_auc": "" if self.test_auc is None else f"{self.test_auc:.6f}",
            "train_auc": "" if self.train_auc is None else f"{self.train_auc:.6f}",
            "sigma": "" if self.sigma is None else f"{self.sigma:.6g}",
            "kappa_c": self.queries.kappa_c if self.queries else "",
            "kappa_s": self.queries.kappa_s if self.queries else "",
            "kappa_w": self.queries.kappa_w if self.queries else "",
            "comm_rounds": self.comm.rounds if self.comm else "",
            "comm_uplink_values": self.comm.uplink_values if self.comm else "",
            "wall_time": f"{self.wall_time:.3f}",
            "error": self.error or "",
        }


def _derive_seed(split_seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([split_seed, repeat]).generate_state(1)[0])


def run_single(
    config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
) -> tuple[float, float, object]:
    """Train one configuration, return (test AUC, train AUC, TrainResult)."""
    pop = partition(train_set, None, ONE_RECORD_PER_CLIENT, seed=config.seed)
    result = train(config, pop)
    test_scores = predict(result.ensemble, test_set.features)
    train_scores = predict(result.ensemble, train_set.features)
    return (
        auc_roc(test_set.labels, test_scores),
        auc_roc(train_set.labels, train_scores),
        result,
    )


def _materialise_dataset(spec: dict) -> tuple[str, Dataset]:
    spec = dict(spec)
    kind = spec.pop("kind", "synthetic")
    if kind == "synthetic":
        name = spec.pop("name", "synthetic")
        return name, synthesize(
            n=int(spec.get("n", 20000)),
            m=int(spec.get("m", 10)),
            skewed_fraction=float(spec.get("skewed_fraction", 0.0)),
            class_balance=float(spec.get("class_balance", 0.5)),
            seed=int(spec.get("seed", 0)),
        )
    if kind == "csv":
        path = spec["path"]
        name = spec.get("name", Path(path).stem)
        return name, load_csv(path, spec["label_column"], spec.get("bounds"))
    raise InvalidParameterError(f"unknown dataset kind: {kind!r}")


def run_grid(
    configs: dict[str, TrainConfig],
    dataset_spec: dict,
    epsilons,
    split_seeds,
    repeats: int,
    out_path,
    test_fraction: float = 0.3,
) -> list[ExperimentResult]:
    """Run configs x epsilons x split seeds x repeats, appending rows as they finish.

    An epsilon of None runs without noise. Individual failures are recorded
    in their row and the grid continues. Re-running with the same spec skips
    rows already present in the output, so an interrupted grid resumes to the
    same final table. A mean/std summary per (config, epsilon) cell is written
    alongside, and the flattened configs go to a JSON sidecar.
    """
    out_path = Path(out_path)
    dataset_name, dataset = _materialise_dataset(dataset_spec)

    done: set[tuple] = set()
    mode = "a"
    if out_path.exists():
        with open(out_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                done.add(
                    (row["config_id"], row["epsilon"], row["split_seed"], row["repeat"])
                )
    else:
        mode = "w"

    sidecar = {
        cid: cfg.to_flat_dict() for cid, cfg in configs.items()
    }
    with open(out_path.with_suffix(".configs.json"), "w", encoding="utf-8") as fh:
        json.dump({"dataset": dataset_spec, "configs": sidecar}, fh, indent=2)

    results: list[ExperimentResult] = []
    with open(out_path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        if mode == "w":
            writer.writeheader()
        for cid, cfg in configs.items():
            for eps in epsilons:
                for split_seed in split_seeds:
                    for rep in range(repeats):
                        key = (
                            cid,
                            "" if eps is None else str(float(eps)),
                            str(split_seed),
                            str(rep),
                        )
                        if key in done:
                            continue
                        res = _run_cell(
                            cid, cfg, dataset_name, dataset, eps, split_seed, rep, test_fraction
                        )
                        results.append(res)
                        writer.writerow(res.to_row())
                        fh.flush()

    _write_summary(out_path)
    return results


def _run_cell(cid, cfg, dataset_name, dataset, eps, split_seed, rep, test_fraction):
    start = time.perf_counter()
    try:
        pair = train_test_split(dataset, 1.0 - test_fraction, seed=split_seed)
        run_cfg = cfg.replace(
            seed=_derive_seed(split_seed, rep),
            budget=None if eps is None else budget_for(float(eps), pair.train.n),
            m=cfg.m if cfg.m is not None else dataset.m,
        )
        test_auc, train_auc, outcome = run_single(run_cfg, pair.train, pair.test)
        return ExperimentResult(
            config_id=cid,
            dataset=dataset_name,
            epsilon=None if eps is None else float(eps),
            split_seed=split_seed,
            repeat=rep,
            test_auc=test_auc,
            train_auc=train_auc,
            sigma=outcome.sigma,
            queries=outcome.queries,
            comm=comm_accounting(run_cfg),
            wall_time=time.perf_counter() - start,
        )
    except Exception as exc:  # isolate the cell; the grid continues
        return ExperimentResult(
            config_id=cid,
            dataset=dataset_name,
            epsilon=None if eps is None else float(eps),
            split_seed=split_seed,
            repeat=rep,
            status="error",
            error=f"{type(exc).__name__}: {exc}",
            wall_time=time.perf_counter() - start,
        )


def _write_summary(out_path: Path) -> None:
    cells: dict[tuple, list[float]] = {}
    with open(out_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["status"] != "ok" or not row["test_auc"]:
                continue
            cells.setdefault((row["config_id"], row["epsilon"]), []).append(
                float(row["test_auc"])
            )
    summary_path = out_path.with_suffix(".summary.csv")
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "epsilon", "runs", "mean_test_auc", "std_test_auc"])
        for (cid, eps), aucs in sorted(cells.items()):
            arr = np.asarray(aucs)
            writer.writerow(
                [cid, eps, arr.size, f"{arr.mean():.6f}", f"{arr.std(ddof=0):.6f}"]
            )


def _average_ranks(values: list[tuple[str, float]]) -> dict[str, float]:
    # rank 1 = highest value; ties share the mean of the ranks they cover
    methods = [m for m, _ in values]
    aucs = np.asarray([v for _, v in values])
    ranks = rankdata(-aucs)  # average ties
    return {m: float(r) for m, r in zip(methods, ranks)}


def rank_table(results) -> dict[float | None, dict[str, float]]:
    """Average rank of each method across datasets, one table column per epsilon.

    ``results`` is an iterable of ExperimentResult (or row dicts). Methods are
    ranked 1 = best by mean test AUC inside every (dataset, epsilon) cell;
    ranks then average over datasets. Raises MissingCellError when a method
    lacks results for some cell.
    """
    by_cell: dict[tuple, dict[str, list[float]]] = {}
    methods: set[str] = set()
    for res in results:
        if isinstance(res, ExperimentResult):
            if res.status != "ok" or res.test_auc is None:
                continue
            dataset, eps, method, auc = res.dataset, res.epsilon, res.config_id, res.test_auc
        else:
            dataset, eps, method, auc = (
                res["dataset"],
                res["epsilon"],
                res["config_id"],
                float(res["test_auc"]),
            )
        methods.add(method)
        by_cell.setdefault((dataset, eps), {}).setdefault(method, []).append(auc)

    missing = [
        (dataset, eps, method)
        for (dataset, eps), cell in sorted(by_cell.items(), key=str)
        for method in sorted(methods)
        if method not in cell
    ]
    if missing:
        raise MissingCellError(f"missing results for cells: {missing}")

    per_eps: dict[float | None, dict[str, list[float]]] = {}
    for (dataset, eps), cell in by_cell.items():
        means = [(method, float(np.mean(aucs))) for method, aucs in sorted(cell.items())]
        ranks = _average_ranks(means)
        bucket = per_eps.setdefault(eps, {})
        for method, rank in ranks.items():
            bucket.setdefault(method, []).append(rank)
    return {
        eps: {method: float(np.mean(ranks)) for method, ranks in sorted(bucket.items())}
        for eps, bucket in per_eps.items()
    }
