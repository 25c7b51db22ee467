"""Experiment execution and CSV/JSON output.

Layout of an output directory::

    manifest.json
    <variant>/aggregate.csv          per-round mean/min/max over repeats
    <variant>/seed_<s>/metrics.csv   round,test_acc,test_loss,train_loss_mean,participants
    <variant>/seed_<s>/clients.csv   round,client_id,train_loss
    <variant>/seed_<s>/cosine.csv    round,layer,mean_cos,pair_count,excluded_pairs

Rows are flushed as soon as a round finishes, so a killed run leaves every
completed round on disk. ``participants`` lists client ids joined by ``;``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from functools import lru_cache
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from fedlab.config import ExperimentConfig, render_config
from fedlab.data import Dataset, load_cifar10, partition, synth_blobs
from fedlab.diagnostics import RoundMetrics
from fedlab.errors import FedLabError
from fedlab.model import ModelSpec
from fedlab.optim import fedavg_run

log = logging.getLogger(__name__)

METRICS_HEADER = ["round", "test_acc", "test_loss", "train_loss_mean", "participants"]
CLIENTS_HEADER = ["round", "client_id", "train_loss"]
COSINE_HEADER = ["round", "layer", "mean_cos", "pair_count", "excluded_pairs"]
AGGREGATE_HEADER = [
    "round", "acc_mean", "acc_min", "acc_max", "loss_mean", "loss_min", "loss_max",
    "train_loss_mean", "train_loss_min", "train_loss_max",
]


def _num(x: float) -> str:
    return repr(float(x))


class MetricsWriter:
    """Append-only writer for the three per-repeat CSV files."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.paths = {
            "metrics": self.directory / "metrics.csv",
            "clients": self.directory / "clients.csv",
            "cosine": self.directory / "cosine.csv",
        }
        self._files = {k: open(p, "w", newline="") for k, p in self.paths.items()}
        self._csv = {k: csv.writer(f, lineterminator="\n") for k, f in self._files.items()}
        self._csv["metrics"].writerow(METRICS_HEADER)
        self._csv["clients"].writerow(CLIENTS_HEADER)
        self._csv["cosine"].writerow(COSINE_HEADER)
        self._flush()

    def write(self, m: RoundMetrics) -> None:
        self._csv["metrics"].writerow([
            m.round, _num(m.test_acc), _num(m.test_loss), _num(m.train_loss_mean),
            ";".join(str(c) for c in m.participants),
        ])
        for cid in sorted(m.per_client_losses):
            self._csv["clients"].writerow([m.round, cid, _num(m.per_client_losses[cid])])
        for s in m.similarity:
            self._csv["cosine"].writerow([m.round, s.layer, _num(s.mean_cos), s.pair_count, s.excluded_pairs])
        self._flush()

    def _flush(self) -> None:
        for f in self._files.values():
            f.flush()

    def close(self) -> None:
        for f in self._files.values():
            f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit_metrics(stream: Iterable[RoundMetrics], sink) -> dict[str, Path]:
    """Write a metrics stream to the CSV files under directory ``sink``."""
    with MetricsWriter(sink) as w:
        for m in stream:
            w.write(m)
    return dict(w.paths)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({
            "round": int(r["round"]),
            "test_acc": float(r["test_acc"]),
            "test_loss": float(r["test_loss"]),
            "train_loss_mean": float(r["train_loss_mean"]),
            "participants": tuple(int(c) for c in r["participants"].split(";") if c),
        })
    return out


# ---------------------------------------------------------------- data and models


@lru_cache(maxsize=4)
def _synth(n, n_test, classes, dim, spread, data_seed):
    train = synth_blobs(n, classes, dim, spread, data_seed)
    test = synth_blobs(n_test, classes, dim, spread, data_seed, split=1)
    return train, test


@lru_cache(maxsize=1)
def _cifar(path):
    return load_cifar10(path)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synth":
        return _synth(cfg.n, cfg.n_test, cfg.classes, cfg.dim, cfg.spread, cfg.data_seed)
    return _cifar(str(cfg.cifar_path))


def build_model(cfg: ExperimentConfig, train: Dataset) -> ModelSpec:
    hidden = cfg.hidden if cfg.model == "mlp" else ()
    return ModelSpec(cfg.model, train.feature_shape, train.num_classes, hidden)


def make_shards(cfg: ExperimentConfig, train: Dataset, seed: int):
    return partition(train, cfg.K, cfg.partition, seed, alpha=cfg.alpha, sgm=cfg.sgm)


# ---------------------------------------------------------------- running


def run_repeat(
    cfg: ExperimentConfig, seed: int, out_dir, *, workers: int = 1,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> list[RoundMetrics]:
    """One seeded FedAvg run of a variant-free config, streamed to CSV."""
    train, test = load_data(cfg)
    spec = build_model(cfg, train)
    shards = make_shards(cfg, train, seed)
    with MetricsWriter(out_dir) as writer:
        def sink(m: RoundMetrics) -> None:
            writer.write(m)
            if on_round is not None:
                on_round(m)

        run = fedavg_run(
            spec, train, test, shards, cfg.fed_config(seed),
            workers=workers, eval_batch=cfg.eval_batch, on_round=sink,
        )
    return run.metrics


@dataclass
class RunManifest:
    config: str
    output_dir: str
    implementation_version: str
    wall_clock_seconds: float = 0.0
    repeats: list[dict] = field(default_factory=list)
    aggregates: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r["status"] == "ok" for r in self.repeats)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def run_experiment(
    cfg: ExperimentConfig, out_dir=None, *, seed_offset: int = 0, workers: int = 1,
) -> RunManifest:
    """Run every variant for every seed, then write aggregates and the manifest.

    A failing repeat is recorded in the manifest and does not stop the others.
    """
    for _, vcfg in cfg.resolved():
        if vcfg.dataset == "cifar10" and not Path(vcfg.cifar_path).exists():
            raise FileNotFoundError(f"CIFAR-10 data not found at {vcfg.cifar_path}")
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(render_config(cfg), str(out), _version())
    started = time.perf_counter()
    for label, vcfg in cfg.resolved():
        histories = []
        for base_seed in vcfg.seeds:
            seed = base_seed + seed_offset
            rdir = out / label / f"seed_{seed}"
            entry = {"variant": label, "seed": seed, "status": "ok", "error": None,
                     "files": {k: str(rdir / f"{k}.csv") for k in ("metrics", "clients", "cosine")}}
            try:
                histories.append(run_repeat(vcfg, seed, rdir, workers=workers))
            except (FedLabError, FloatingPointError) as err:
                log.error("variant %s seed %d failed: %s", label, seed, err)
                entry["status"] = "failed"
                entry["error"] = str(err)
            manifest.repeats.append(entry)
        if histories:
            path = out / label / "aggregate.csv"
            write_aggregate(histories, path)
            manifest.aggregates[label] = str(path)
    manifest.wall_clock_seconds = time.perf_counter() - started
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def write_aggregate(histories: list[list[RoundMetrics]], path) -> None:
    rounds = min(len(h) for h in histories)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for r in range(rounds):
            row = [histories[0][r].round]
            for attr in ("test_acc", "test_loss", "train_loss_mean"):
                vals = np.array([getattr(h[r], attr) for h in histories])
                row += [_num(math.fsum(vals) / len(vals)), _num(vals.min()), _num(vals.max())]
            w.writerow(row)


def resolve_output_dir(cli_value: str | None, cfg: ExperimentConfig) -> str:
    """CLI flag, then $FEDLAB_OUT, then the config's output_dir."""
    if cli_value:
        return cli_value
    return os.environ.get("FEDLAB_OUT") or cfg.output_dir
