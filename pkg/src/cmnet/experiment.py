"""Experiment protocol: nested training sizes, seeded restarts, held-out metrics.

Restart seeds come from the splitmix64 finalizer applied to
``master_seed + (index + 1) * 0x9E3779B97F4A7C15`` (mod 2**64), the same
sequence a splitmix64 generator seeded with ``master_seed`` would emit.
Indices below ``2**32`` are restarts; the data split and the training
schedule use the reserved indices ``SPLIT_STREAM`` and ``SCHEDULE_STREAM``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .cmn import CMNModel, FitConfig, fit, sample_class_probs
from .data import Dataset, PinwheelParams, doubling_schedule, generate_pinwheel, load_csv, standardize, stratified_split
from .metrics import PredictionSet, accuracy, ece, lpd, steps_to_converge, waic

__all__ = [
    "ExperimentConfig",
    "ExperimentError",
    "splitmix64",
    "derive_seed",
    "evaluate",
    "run_experiment",
    "pinwheel_protocol",
    "aggregate",
    "validate_results",
    "raw_metrics",
    "WORKERS_ENV",
]

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
SPLIT_STREAM = 1 << 32
SCHEDULE_STREAM = (1 << 32) + 1
EVAL_STREAM = 1

WORKERS_ENV = "CMNET_THREADS"
METRICS = ("accuracy", "lpd", "ece", "waic", "steps_to_converge", "wall_seconds", "final_elbo")
AGGREGATE_TOL = 1e-12


class ExperimentError(RuntimeError):
    """A run failed; partial results were flushed to ``path`` if one was set."""

    def __init__(self, message: str, path=None):
        self.path = path
        super().__init__(message)


def splitmix64(x: int) -> int:
    z = x & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    return splitmix64((master + (index + 1) * GOLDEN_GAMMA) & MASK64)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one results file.

    ``dataset`` is ``{"kind": "pinwheel", ...PinwheelParams fields}`` or
    ``{"kind": "csv", "path": ..., "label_column": "last", "has_header": true}``.
    ``h`` defaults to ``L - 1``.
    """

    dataset: dict
    train_sizes: tuple
    test_size: int | None = None
    test_fraction: float | None = None
    K: int = 10
    h: int | None = None
    v0: float = 10.0
    a0: float = 2.0
    b0: float = 1.0
    sigma0: float = 5.0
    sigma1: float = 5.0
    max_sweeps: int = 500
    inner_iters: int = 1
    init_scale: float = 1.0
    restarts: int = 16
    num_samples: int = 64
    ece_bins: int = 10
    standardize: bool = True
    master_seed: int = 0
    output: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "train_sizes", tuple(int(s) for s in self.train_sizes))
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not self.train_sizes:
            raise ValueError("need at least one train size")
        if (self.test_size is None) == (self.test_fraction is None):
            raise ValueError("set exactly one of test_size and test_fraction")
        if self.dataset.get("kind") not in ("pinwheel", "csv"):
            raise ValueError("dataset kind must be 'pinwheel' or 'csv'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_sizes"] = list(self.train_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def restart_seeds(self) -> list[int]:
        return [derive_seed(self.master_seed, r) for r in range(self.restarts)]


def pinwheel_protocol(**overrides) -> ExperimentConfig:
    """2100 pinwheel points, 500 held out, training sizes 50 to 1600."""
    base = dict(
        dataset={"kind": "pinwheel", **asdict(PinwheelParams())},
        train_sizes=(50, 100, 200, 400, 800, 1600),
        test_size=500,
        K=10,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def _load_dataset(spec: dict) -> Dataset:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "pinwheel":
        return generate_pinwheel(PinwheelParams(**spec))
    return load_csv(spec["path"], spec.get("label_column", "last"), spec.get("has_header", True))


def _split(cfg: ExperimentConfig, ds: Dataset):
    seed = derive_seed(cfg.master_seed, SPLIT_STREAM)
    return stratified_split(ds, cfg.test_fraction, seed=seed, test_size=cfg.test_size)


def evaluate(post, train: Dataset, test: Dataset, num_samples: int = 64, ece_bins: int = 10, seed: int = 0) -> dict:
    """Test accuracy, LPD and ECE plus WAIC on the training rows."""
    probs = sample_class_probs(post, test.features, num_samples, seed).mean(axis=0)
    pred = PredictionSet(probs / probs.sum(axis=1, keepdims=True), test.labels)
    draws = sample_class_probs(post, train.features, num_samples, seed + 1)
    picked = draws[:, np.arange(len(train)), train.labels]
    ll = np.log(np.maximum(picked, 1e-300))
    return {
        "accuracy": accuracy(pred),
        "lpd": lpd(pred),
        "ece": ece(pred, ece_bins),
        "waic": waic(ll),
    }


def _model(cfg: ExperimentConfig, d: int, L: int) -> CMNModel:
    h = L - 1 if cfg.h is None else cfg.h
    return CMNModel(d=d, h=h, K=cfg.K, L=L, v0=cfg.v0, a0=cfg.a0, b0=cfg.b0, sigma0=cfg.sigma0, sigma1=cfg.sigma1)


def _run_one(cfg: ExperimentConfig, train: Dataset, test: Dataset, restart: int, seed: int) -> dict:
    model = _model(cfg, train.d, train.num_classes)
    fit_cfg = FitConfig(max_sweeps=cfg.max_sweeps, inner_iters=cfg.inner_iters, seed=seed % (1 << 63), init_scale=cfg.init_scale)
    start = time.monotonic()
    post, trace = fit(model, train.features, train.labels, fit_cfg)
    wall = time.monotonic() - start
    elbos = trace.elbo_per_sweep
    if len(elbos) >= 3:
        conv = steps_to_converge(elbos)
        steps, decayed = conv.steps, conv.decayed
    else:
        steps, decayed = len(elbos), False
    metrics = evaluate(post, train, test, cfg.num_samples, cfg.ece_bins, derive_seed(seed, EVAL_STREAM) % (1 << 63))
    return {
        "train_size": len(train),
        "restart": restart,
        "seed": seed,
        **metrics,
        "steps_to_converge": int(steps),
        "decayed": bool(decayed),
        "wall_seconds": wall,
        "final_elbo": float(elbos[-1]),
        "sweeps": len(trace),
        "warnings": dict(trace.warnings),
    }


def _run_one_packed(args):
    return _run_one(*args)


def _num_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _std(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def aggregate(runs: list[dict]) -> list[dict]:
    """Mean and sample standard deviation of each metric per train size."""
    out = []
    for size in sorted({r["train_size"] for r in runs}):
        rows = [r for r in runs if r["train_size"] == size]
        entry = {"train_size": size, "n_runs": len(rows)}
        for m in METRICS:
            values = [float(r[m]) for r in rows]
            entry[f"{m}_mean"] = float(np.mean(values))
            entry[f"{m}_std"] = _std(values)
        out.append(entry)
    return out


def _check_aggregates(record: dict) -> None:
    fresh = aggregate(record["runs"])
    if len(fresh) != len(record["aggregates"]):
        raise ExperimentError("aggregate rows do not match raw rows")
    for got, want in zip(record["aggregates"], fresh):
        for key, value in want.items():
            if not math.isclose(got[key], value, rel_tol=0.0, abs_tol=AGGREGATE_TOL):
                raise ExperimentError(f"aggregate {key} at size {want['train_size']} disagrees with raw rows")


def _schema() -> dict:
    text = resources.files("cmnet").joinpath("schemas/results.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_results(record: dict) -> None:
    jsonschema.validate(record, _schema())


def raw_metrics(record: dict) -> list[dict]:
    """Per-run rows without wall time, for reproducibility comparisons."""
    return [{k: v for k, v in r.items() if k != "wall_seconds"} for r in record["runs"]]


def _write(record: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with path.with_suffix(".csv").open("w", newline="", encoding="utf-8") as fh:
        columns = ["train_size", "n_runs"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in record["aggregates"]:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_experiment(cfg: ExperimentConfig, progress=None) -> dict:
    """Fit every (train size, restart) pair and return the results record.

    When ``cfg.output`` is set the record is written there as JSON, with the
    per-size summary next to it as CSV. On failure whatever finished is
    written with ``"partial": true`` and :class:`ExperimentError` is raised.
    """
    record = {
        "schema_version": 1,
        "partial": True,
        "error": None,
        "config": cfg.to_dict(),
        "dataset": {"n_train": None, "n_test": None, "d": None, "L": None, "class_names": None},
        "runs": [],
        "aggregates": [],
    }
    try:
        ds = _load_dataset(cfg.dataset)
        train_all, test_raw = _split(cfg, ds)
        record["dataset"] = {
            "n_train": len(train_all),
            "n_test": len(test_raw),
            "d": ds.d,
            "L": ds.num_classes,
            "class_names": list(ds.class_names) if ds.class_names is not None else None,
        }
        subsets = doubling_schedule(train_all, cfg.train_sizes, derive_seed(cfg.master_seed, SCHEDULE_STREAM))
        jobs = []
        for subset in subsets:
            if cfg.standardize:
                train, (test,) = standardize(subset, [test_raw])
            else:
                train, test = subset, test_raw
            for r, seed in enumerate(cfg.restart_seeds()):
                jobs.append((cfg, train, test, r, seed))

        workers = _num_workers()
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for row in pool.map(_run_one_packed, jobs):
                    record["runs"].append(row)
                    if progress:
                        progress(row)
        else:
            for job in jobs:
                row = _run_one(*job)
                record["runs"].append(row)
                if progress:
                    progress(row)
        record["partial"] = False
    except Exception as err:
        record["error"] = f"{type(err).__name__}: {err}"
        record["aggregates"] = aggregate(record["runs"])
        if cfg.output:
            _write(record, cfg.output)
        raise ExperimentError(record["error"], cfg.output) from err

    record["aggregates"] = aggregate(record["runs"])
    _check_aggregates(record)
    validate_results(record)
    if cfg.output:
        _write(record, cfg.output)
    return record
