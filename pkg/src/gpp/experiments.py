"""Experiment grids, dataset specs, and the sweep runner.

Desk-scale defaults keep every grid small enough for one CPU; ``full=True``
restores the larger grids, training lengths and dataset sizes.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audit import ProbeSpec, run_audit
from .data import (LabeledDataset, build_mnist_composite, data_dir, gen_correlated_synthetic,
                   load_csv_labeled, load_mnist, partition_horizontal)
from .errors import ConfigError, DataError
from .federated import FedConfig, heterogeneous_betas, run_protocol
from .results import ResultRecord, ResultSink, fingerprint, read_results
from .trainer import METHODS, GppTrainer, RandomProjection, TrainConfig

log = logging.getLogger(__name__)

EXPERIMENTS = ("baselines", "beta-sweep", "dz-sweep", "k-ablation", "rho-robustness",
               "seed-stats", "distributed")
DATASETS = ("mnist-composite", "hapt", "synthetic")
BASELINE_METHODS = METHODS + ("random-projection",)
DIST_ARMS = ("centralized", "distributed", "distributed-hetero")
RELEASE_MODES = ("sample", "mean")

SYNTH_D_X = 32


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "mnist-composite"
    n_train: int = 10000
    n_test: int = 2000
    rho: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in DATASETS:
            raise ConfigError(f"unknown dataset {self.name!r}; choose from {DATASETS}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("dataset sizes must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")


# per-dataset architecture and schedule at desk scale
_DESK_TRAIN = {
    "mnist-composite": dict(d_z=120, lr=1e-3, epochs=15, encoder_hidden=(512, 256),
                            classifier_hidden=(256, 128)),
    "synthetic": dict(d_z=8, lr=1e-3, epochs=20, encoder_hidden=(64, 32),
                      classifier_hidden=(32, 16)),
    "hapt": dict(d_z=80, lr=1e-3, epochs=15, encoder_hidden=(256, 128),
                 classifier_hidden=(128, 64)),
}
_FULL_TRAIN = {
    "mnist-composite": dict(d_z=120, lr=1e-4, epochs=50, encoder_hidden=(512, 256),
                            classifier_hidden=(256, 128)),
    "synthetic": dict(d_z=8, lr=1e-4, epochs=50, encoder_hidden=(64, 32),
                      classifier_hidden=(32, 16)),
    "hapt": dict(d_z=80, lr=1e-4, epochs=50, encoder_hidden=(256, 128),
                 classifier_hidden=(128, 64)),
}
_PROBE_LR = {"mnist-composite": 1e-4, "synthetic": 1e-3, "hapt": 1e-4}


def default_train_config(dataset: str, full: bool = False, **overrides) -> TrainConfig:
    base = dict((_FULL_TRAIN if full else _DESK_TRAIN)[dataset])
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**base)


def default_probe(dataset: str, train: TrainConfig) -> ProbeSpec:
    # same capacity as the training adversary
    return ProbeSpec(hidden=tuple(train.classifier_hidden), lr=_PROBE_LR[dataset])


def default_dataset(dataset: str, full: bool = False, rho: float = 0.0) -> DatasetSpec:
    if dataset == "mnist-composite":
        return DatasetSpec(dataset, 30000 if full else 10000, 5000 if full else 2000)
    if dataset == "synthetic":
        return DatasetSpec(dataset, 20000 if full else 8000, 4000, rho=rho)
    return DatasetSpec(dataset, 7767, 3162)


def default_axes(experiment: str, full: bool = False) -> Dict[str, list]:
    if experiment == "baselines":
        return {"method": list(BASELINE_METHODS),
                **({"d_z": [40, 80, 120, 160, 200]} if full else {})}
    if experiment == "beta-sweep":
        return {"beta": [0.1, 0.5, 1.0, 2.0, 4.0, 8.0] if full else [0.1, 1.0, 8.0]}
    if experiment == "dz-sweep":
        if full:
            return {"d_z": [20, 40, 60, 80, 100, 120, 160, 200, 300, 400],
                    "beta": [0.5, 1.0, 2.0]}
        return {"d_z": [40, 120]}
    if experiment == "k-ablation":
        return {"k": [0, 1, 2, 3, 5, 10] if full else [0, 2]}
    if experiment == "rho-robustness":
        return {"rho": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] if full else [0.0, 0.8],
                "method": ["gpp", "no-privacy"]}
    if experiment == "seed-stats":
        return ({"method": ["gpp", "no-privacy", "noisy-encoder"], "d_z": [40, 80, 120, 160]}
                if full else {})
    if experiment == "distributed":
        return {"arm": list(DIST_ARMS)}
    raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")


_AXIS_CHECKS = {
    "beta": lambda v: float(v) >= 0,
    "lam": lambda v: float(v) >= 0,
    "d_z": lambda v: int(v) >= 1 and int(v) == v,
    "k": lambda v: int(v) >= 0 and int(v) == v,
    "rho": lambda v: 0.0 <= float(v) <= 1.0,
    "method": lambda v: v in BASELINE_METHODS,
    "arm": lambda v: v in DIST_ARMS,
    "epochs": lambda v: int(v) >= 1,
}


@dataclass
class ExperimentConfig:
    experiment: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    axes: Dict[str, list] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [0])
    out: Optional[str] = None
    fmt: str = "json-lines"
    probe: Optional[ProbeSpec] = None
    release_mode: str = "sample"
    clients: int = 5
    rounds: Optional[int] = None
    partition: str = "uniform-random"
    noise_scale: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        for axis, values in self.axes.items():
            check = _AXIS_CHECKS.get(axis)
            if check is None:
                raise ConfigError(f"unknown sweep axis {axis!r}")
            bad = [v for v in values if not check(v)]
            if bad:
                raise ConfigError(f"invalid values for axis {axis}: {bad}")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if self.release_mode not in RELEASE_MODES:
            raise ConfigError(f"release mode must be one of {RELEASE_MODES}")
        if self.clients < 1:
            raise ConfigError("need at least one client")
        if self.probe is None:
            self.probe = default_probe(self.dataset.name, self.train)

    def fingerprint(self) -> str:
        return fingerprint(self._identity())

    def _identity(self) -> dict:
        return {"experiment": self.experiment, "dataset": asdict(self.dataset),
                "train": self.train.to_dict(), "axes": self.axes, "seeds": self.seeds,
                "probe": asdict(self.probe), "release_mode": self.release_mode,
                "clients": self.clients, "rounds": self.rounds,
                "partition": self.partition, "noise_scale": self.noise_scale}

    def points(self) -> List[Tuple[Dict[str, object], int]]:
        names = sorted(self.axes)
        combos = itertools.product(*(self.axes[n] for n in names)) if names else [()]
        return [(dict(zip(names, c)), s) for c in combos for s in self.seeds]


def make_config(experiment: str, dataset: str = None, full: bool = False,
                seeds: Sequence[int] = None, axes: Dict[str, list] = None,
                rho: float = None, **train_overrides) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from desk (or full) defaults."""
    if dataset is None:
        dataset = {"rho-robustness": "synthetic", "distributed": "synthetic"}.get(
            experiment, "mnist-composite")
    if experiment == "rho-robustness" and dataset != "synthetic":
        raise ConfigError("rho-robustness needs the synthetic dataset")
    ds = default_dataset(dataset, full, rho or 0.0)
    train = default_train_config(dataset, full, **train_overrides)
    if seeds is None:
        seeds = list(range(10)) if experiment == "seed-stats" else [0]
    return ExperimentConfig(experiment, ds, train,
                            default_axes(experiment, full) if axes is None else axes,
                            list(seeds))


# ---------------------------------------------------------------------------
# datasets

def _hapt_paths() -> Tuple[str, str]:
    root = os.path.join(str(data_dir()), "hapt")
    return os.path.join(root, "train.csv"), os.path.join(root, "test.csv")


def load_dataset(spec: DatasetSpec) -> Tuple[LabeledDataset, LabeledDataset]:
    """Train and test splits for ``spec``; raises DataError with fetch hints."""
    if spec.name == "synthetic":
        return (gen_correlated_synthetic(spec.n_train, SYNTH_D_X, spec.rho, spec.seed),
                gen_correlated_synthetic(spec.n_test, SYNTH_D_X, spec.rho, spec.seed + 1))
    if spec.name == "mnist-composite":
        imgs, labs = load_mnist("train")
        timgs, tlabs = load_mnist("test")
        pair_tr = -(-2 * spec.n_train // imgs.shape[0])
        pair_te = -(-2 * spec.n_test // timgs.shape[0])
        train = build_mnist_composite(imgs, labs, spec.seed, pair_tr, spec.n_train)
        test = build_mnist_composite(timgs, tlabs, spec.seed + 1, pair_te, spec.n_test)
        return train, test
    tr_path, te_path = _hapt_paths()
    if not (os.path.exists(tr_path) and os.path.exists(te_path)):
        raise DataError(
            f"HAPT not found. Export the UCI HAPT train/test features as CSV with "
            f"'activity' and 'subject' columns to {tr_path} and {te_path} "
            f"(set GPP_DATA_DIR to relocate), then run `gpp data fetch-check --dataset hapt`.")
    train, stats, _ = load_csv_labeled(tr_path)
    test, _, _ = load_csv_labeled(te_path, stats=stats)
    return train, test


# ---------------------------------------------------------------------------
# one sweep point

def _apply_axes(cfg: ExperimentConfig, axes: Dict[str, object], seed: int):
    train_kw = {k: axes[k] for k in ("beta", "lam", "d_z", "k", "epochs") if k in axes}
    train = replace(cfg.train, seed=seed, **train_kw)
    ds = cfg.dataset
    if "rho" in axes:
        ds = replace(ds, rho=float(axes["rho"]))
    return train, ds


def point_fingerprint(cfg: ExperimentConfig, axes: Dict[str, object], seed: int) -> str:
    train, ds = _apply_axes(cfg, axes, seed)
    ident = cfg._identity()
    ident.pop("axes")
    ident.pop("seeds")
    ident.update(train=train.to_dict(), dataset=asdict(ds), point=axes, seed=seed)
    return fingerprint(ident)


def _audit_pair(cfg, release, train_ds, test_ds, seed):
    """Audit in the configured mode first, then the other mode for reference."""
    out = {}
    for mode in (cfg.release_mode,) + tuple(m for m in RELEASE_MODES if m != cfg.release_mode):
        rng = np.random.default_rng([seed, 0x5EED])
        ztr, zte = release(train_ds.x, mode, rng, "train"), release(test_ds.x, mode, rng, "test")
        out[mode] = run_audit(None, train_ds, test_ds, cfg.probe, [seed],
                              mode=mode, z_train=ztr, z_test=zte)
    return out


def _train_point(cfg, train, method, data):
    if method == "random-projection":
        proj = RandomProjection.fit(data.d_x, train.d_z, train.seed)
        return (lambda x, mode, rng, split: proj.release(x)), {}
    trainer = GppTrainer(data, train, method,
                         cfg.noise_scale if method == "noisy-encoder" else 0.0)
    model = trainer.run()
    return (lambda x, mode, rng, split: model.release(x, mode, rng)), model.traces


def _distributed_point(cfg, train, arm, data, test):
    if arm == "centralized":
        return _train_point(cfg, train, "gpp", data)
    t = cfg.clients
    mode = "by-sensitive-class" if cfg.partition == "by-sensitive-class" else "uniform-random"
    shards = partition_horizontal(data, t, mode, train.seed)
    # equal passes over local data: each client runs as many epochs as the
    # centralized trainer
    rounds = cfg.rounds or max(1, train.epochs * (data.n // train.batch_size) // t)
    fed = FedConfig(batch_size=train.batch_size, k=train.k, lr=train.lr, rounds=rounds,
                    d_z=train.d_z, seed=train.seed, encoder_hidden=train.encoder_hidden,
                    classifier_hidden=train.classifier_hidden)
    betas = (heterogeneous_betas(t, train.seed) if arm == "distributed-hetero"
             else [train.beta] * t)
    res = run_protocol(data, shards, fed, betas, [train.lam] * t)
    owner_train = np.empty(data.n, dtype=np.int64)
    for sh in shards:
        owner_train[sh.indices] = sh.client_id
    owner_test = np.random.default_rng([train.seed, 0x0C11E]).integers(0, t, test.n)
    owners = {"train": owner_train, "test": owner_test}
    traces = {"uplink_bytes": [res.ledger.uplink_total],
              "uplink_scalar_bytes": [res.ledger.uplink_scalar_total]}
    return (lambda x, mode, rng, split: res.release(x, owners[split], mode, rng)), traces


def run_point(cfg: ExperimentConfig, axes: Dict[str, object], seed: int,
              datasets=None) -> Tuple[ResultRecord, dict]:
    """Train and audit one grid point; returns the record and its traces."""
    train, ds = _apply_axes(cfg, axes, seed)
    data, test = datasets if datasets is not None else load_dataset(ds)
    t0 = time.perf_counter()
    if cfg.experiment == "distributed":
        release, traces = _distributed_point(cfg, train, axes.get("arm", "distributed"), data, test)
    else:
        release, traces = _train_point(cfg, train, axes.get("method", "gpp"), data)
    reports = _audit_pair(cfg, release, data, test, seed)
    wall = time.perf_counter() - t0
    main = reports[cfg.release_mode]
    extra = {"fano_lower_bound_on_error": main.fano_lower_bound_on_error,
             "mi_estimate": main.mi_estimate, "release_mode": cfg.release_mode}
    for mode, rep in reports.items():
        if mode != cfg.release_mode:
            extra[f"{mode}_utility_auc"] = rep.utility_auc
            extra[f"{mode}_adversary_auc"] = rep.adversary_auc
    fp = point_fingerprint(cfg, axes, seed)
    rec = ResultRecord(fp, cfg.experiment, dict(axes), seed, main.utility_auc,
                       main.adversary_auc, main.privacy_gap, wall, extra)
    return rec, traces


def _worker(args):
    cfg, axes, seed = args
    return run_point(cfg, axes, seed)


def _write_traces(out: str, rec: ResultRecord, traces: dict) -> str:
    directory = out + ".traces"
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, rec.fingerprint + ".json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump({k: [float(v) for v in vals] for k, vals in traces.items()}, fh)
    os.replace(tmp, path)
    return os.path.relpath(path, os.path.dirname(os.path.abspath(out)))


def run_experiment(cfg: ExperimentConfig, progress=None) -> List[ResultRecord]:
    """Run every (axes x seed) point not already recorded in ``cfg.out``.

    Points run in a bounded process pool when ``cfg.workers > 1``; records are
    written one at a time by this process as they finish. If a point fails,
    finished records stay on disk and the first error is re-raised at the end.
    """
    sink = None
    done = set()
    if cfg.out:
        sink = ResultSink(cfg.out, cfg.fmt, cfg.fingerprint())
        done = sink.completed()
    todo = [(a, s) for a, s in cfg.points() if point_fingerprint(cfg, a, s) not in done]
    existing = [r for r in read_results(cfg.out)] if cfg.out else []
    records, errors = [], []

    def finish(rec, traces):
        if sink is not None:
            if traces:
                rec.traces_ref = _write_traces(cfg.out, rec, traces)
            sink.write(rec)
        records.append(rec)
        if progress is not None:
            progress(rec)

    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futs = [pool.submit(_worker, (cfg, a, s)) for a, s in todo]
            for fut in as_completed(futs):
                try:
                    finish(*fut.result())
                except Exception as exc:  # keep finished points
                    errors.append(exc)
    else:
        cache = {}
        for axes, seed in todo:
            try:
                _, ds = _apply_axes(cfg, axes, seed)
                if ds not in cache:
                    cache.clear()
                    cache[ds] = load_dataset(ds)
                finish(*run_point(cfg, axes, seed, cache[ds]))
            except DataError:
                raise
            except Exception as exc:
                log.error("point %s seed %d failed: %s", axes, seed, exc)
                errors.append(exc)
    if errors:
        raise errors[0]
    fps = {point_fingerprint(cfg, a, s) for a, s in cfg.points()}
    prior = [r for r in existing if r.fingerprint in fps]
    return prior + records
