"""SGD, Parallel SGD, Local SGD and FedAvg on a shared batch-stream scheme.

All trainers take an *objective*: any object exposing ``layout`` and
``loss_and_grad(values, batch) -> (loss, grad)`` on raw float64 arrays.
:class:`fedlab.model.ModelSpec` and :class:`fedlab.toy.QuadraticObjective`
both qualify.

Mini-batches for client ``k`` in its ``j``-th pass over its shard come from
the stream ``(seed, k, j)`` (see :func:`fedlab.data.minibatch_indices`).
Because every algorithm draws from the same streams, the degenerate cases
line up exactly: FedAvg with one client, Local SGD with one device and
Parallel SGD with one device all replay ``sgd_run`` step for step.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from fedlab.data import ClientShard, Dataset, full_shard, minibatch_indices
from fedlab.errors import ConfigError, ContractError, DivergenceError, RoundError
from fedlab.model import ModelSpec, ParamVector, init_params
from fedlab.rng import stream

AGG_MODES = ("weighted", "naive")
UPDATE_OPTIONS = ("delta", "params")


@dataclass(frozen=True)
class FedConfig:
    eta_l: float
    B: int
    E: int
    K: int
    R: int
    eta_g: float = 1.0
    C_frac: float = 1.0
    I: int = 1
    agg_mode: str = "weighted"
    update_option: str = "delta"  # "delta" = Option I, "params" = Option II
    seed: int = 0

    def __post_init__(self):
        if not (self.eta_l > 0 and self.eta_g > 0):
            raise ConfigError("learning rates must be positive")
        for name in ("B", "E", "K", "R", "I"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (0 < self.C_frac <= 1):
            raise ConfigError(f"C_frac must be in (0, 1], got {self.C_frac}")
        if self.agg_mode not in AGG_MODES:
            raise ConfigError(f"agg_mode must be one of {AGG_MODES}")
        if self.update_option not in UPDATE_OPTIONS:
            raise ConfigError(f"update_option must be one of {UPDATE_OPTIONS}")
        if self.update_option == "params" and self.eta_g != 1:
            raise ConfigError("Option II (params) has no global learning rate; set eta_g = 1")

    @property
    def participants_per_round(self) -> int:
        return participant_count(self.K, self.C_frac)


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: int
    payload: ParamVector
    n_samples: int
    train_loss: float
    kind: str = "delta"  # what the payload holds: "delta" or "params"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ContractError("a client update needs n_samples >= 1")
        if self.kind not in UPDATE_OPTIONS:
            raise ContractError(f"unknown payload kind {self.kind!r}")


@dataclass(eq=False)
class RoundResult:
    round: int
    params: ParamVector
    participants: tuple[int, ...]
    updates: list[ClientUpdate]
    start: ParamVector

    def deltas(self) -> list[ClientUpdate]:
        """Updates as Option I payloads, converting Option II parameters if needed."""
        out = []
        for u in self.updates:
            if u.kind == "delta":
                out.append(u)
            else:
                delta = u.payload.values - self.start.values
                out.append(ClientUpdate(u.client_id, self.start.replace(delta), u.n_samples, u.train_loss))
        return out


@dataclass
class TrainResult:
    params: ParamVector
    epoch_losses: list[float]
    history: list[ParamVector] = field(default_factory=list)


@dataclass
class FedRun:
    params: ParamVector
    metrics: list = field(default_factory=list)
    rounds: list[RoundResult] = field(default_factory=list)


# ---------------------------------------------------------------- helpers


def participant_count(K: int, C_frac: float) -> int:
    # Decimal-exact product so that e.g. C=0.7, K=10 gives 7 and not 8.
    return max(math.ceil(Fraction(str(C_frac)) * K), 1)


def sample_participants(K: int, C_frac: float, seed: int, round_index: int) -> np.ndarray:
    """Uniform draw without replacement of max(ceil(C*K), 1) client positions, sorted."""
    m = participant_count(K, C_frac)
    if m >= K:
        return np.arange(K)
    return np.sort(stream(seed, "participants", round_index).choice(K, size=m, replace=False))


def effective_update_amount(eta, E, N, B, K) -> Fraction:
    """eta * E * N / (B * K) as an exact rational.

    Floats are read through their decimal repr, so 0.005 means 5/1000.
    """
    values = [Fraction(str(v)) if isinstance(v, float) else Fraction(v) for v in (eta, E, N, B, K)]
    if any(v <= 0 for v in values):
        raise ContractError("effective_update_amount needs positive inputs")
    eta_, e_, n_, b_, k_ = values
    return eta_ * e_ * n_ / (b_ * k_)


def _initial(objective, theta0: ParamVector | None, seed: int) -> ParamVector:
    if theta0 is not None:
        if tuple(theta0.layout) != tuple(objective.layout):
            raise ContractError("initial parameters do not match the objective layout")
        return theta0
    if isinstance(objective, ModelSpec):
        return init_params(objective, seed)
    raise ContractError("theta0 is required for objectives without an initializer")


def _sgd_step(objective, values: np.ndarray, batch, eta: float, step: int):
    loss, g = objective.loss_and_grad(values, batch)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {step}", last_finite=values, step=step)
    new = values - eta * g
    if not np.all(np.isfinite(new)):
        raise DivergenceError(f"non-finite parameters at step {step}", last_finite=values, step=step)
    return new, loss


def _as_params(err: DivergenceError, layout) -> DivergenceError:
    if isinstance(err.last_finite, np.ndarray):
        err.last_finite = ParamVector(err.last_finite, layout)
    return err


class _BatchCursor:
    """Endless batch source for one device: epoch 0, then epoch 1, ..."""

    def __init__(self, ds: Dataset, shard: ClientShard, B: int, seed: int):
        self.ds, self.shard, self.B, self.seed = ds, shard, B, seed
        self.epoch = 0
        self._queue: list[np.ndarray] = []

    def next(self):
        if not self._queue:
            self._queue = minibatch_indices(self.shard, self.B, self.seed, self.epoch)
            self.epoch += 1
        return self.ds.batch(self._queue.pop(0))


def _ordered(shards: Sequence[ClientShard]) -> list[ClientShard]:
    if not shards:
        raise ContractError("need at least one shard")
    return sorted(shards, key=lambda s: s.client_id)


def _steps_per_epoch(shards: Sequence[ClientShard], B: int) -> int:
    return math.ceil(max(len(s) for s in shards) / B)


# ---------------------------------------------------------------- algorithms


def sgd_run(
    objective, ds: Dataset, eta: float, B: int, E: int, seed: int,
    theta0: ParamVector | None = None, *, keep_history: bool = False,
) -> TrainResult:
    """Mini-batch SGD over the whole dataset; ``B >= len(ds)`` is full-batch GD."""
    theta = _initial(objective, theta0, seed)
    layout = theta.layout
    shard = full_shard(ds)
    values = theta.values
    losses, history, step = [], [], 0
    try:
        for epoch in range(E):
            batch_losses = []
            for idx in minibatch_indices(shard, B, seed, epoch):
                values, loss = _sgd_step(objective, values, ds.batch(idx), eta, step)
                batch_losses.append(loss)
                step += 1
            losses.append(float(np.mean(batch_losses)))
            if keep_history:
                history.append(ParamVector(values, layout))
    except DivergenceError as err:
        raise _as_params(err, layout)
    return TrainResult(ParamVector(values, layout), losses, history)


def parallel_sgd_run(
    objective, ds: Dataset, shards: Sequence[ClientShard], eta: float, B: int, E: int,
    seed: int, theta0: ParamVector | None = None, *, keep_history: bool = False,
) -> TrainResult:
    """Every step, each device contributes one gradient; the server applies their plain mean.

    One epoch is ``ceil(max_k |D_k| / B)`` steps; devices with smaller shards
    roll over into their next shuffled pass.
    """
    theta = _initial(objective, theta0, seed)
    layout = theta.layout
    shards = _ordered(shards)
    cursors = [_BatchCursor(ds, s, B, seed) for s in shards]
    steps = _steps_per_epoch(shards, B)
    values = theta.values
    losses, history, step = [], [], 0
    for _ in range(E):
        step_losses = []
        for _ in range(steps):
            g_sum, loss_sum = None, 0.0
            for cur in cursors:
                loss, g = objective.loss_and_grad(values, cur.next())
                if not math.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss on client {cur.shard.client_id} at step {step}",
                        last_finite=ParamVector(values, layout), step=step,
                    )
                loss_sum += loss
                g_sum = g.copy() if g_sum is None else g_sum.__iadd__(g)
            new = values - eta * (g_sum / len(cursors))
            if not np.all(np.isfinite(new)):
                raise DivergenceError(
                    f"non-finite parameters at step {step}",
                    last_finite=ParamVector(values, layout), step=step,
                )
            values = new
            step_losses.append(loss_sum / len(cursors))
            step += 1
        losses.append(float(np.mean(step_losses)))
        if keep_history:
            history.append(ParamVector(values, layout))
    return TrainResult(ParamVector(values, layout), losses, history)


def local_sgd_run(
    objective, ds: Dataset, shards: Sequence[ClientShard], eta: float, B: int, E: int,
    I: int, seed: int, theta0: ParamVector | None = None, *, keep_history: bool = False,
) -> TrainResult:
    """Devices take ``I`` local steps from the shared model, then parameters are averaged.

    The step budget matches ``parallel_sgd_run`` (``E`` epochs of
    ``ceil(max_k |D_k| / B)`` steps); a trailing period shorter than ``I``
    is still synchronized. ``history`` holds the model after every sync.
    """
    if I < 1:
        raise ConfigError(f"I must be >= 1, got {I}")
    theta = _initial(objective, theta0, seed)
    layout = theta.layout
    shards = _ordered(shards)
    cursors = [_BatchCursor(ds, s, B, seed) for s in shards]
    total = E * _steps_per_epoch(shards, B)
    values = theta.values
    losses, history, done = [], [], 0
    while done < total:
        period = min(I, total - done)
        acc, period_losses = None, []
        for cur in cursors:
            local = values
            try:
                for t in range(period):
                    local, loss = _sgd_step(objective, local, cur.next(), eta, done + t)
                    period_losses.append(loss)
            except DivergenceError as err:
                raise _as_params(err, layout)
            acc = local.copy() if acc is None else acc.__iadd__(local)
        values = acc / len(cursors)
        done += period
        losses.append(float(np.mean(period_losses)))
        if keep_history:
            history.append(ParamVector(values, layout))
    return TrainResult(ParamVector(values, layout), losses, history)


def aggregate(
    updates: Sequence[ClientUpdate], mode: str, update_option: str,
    theta: ParamVector, eta_g: float = 1.0,
) -> ParamVector:
    """Server update: weighted (|D_k|/M) or naive (1/|S|) combination.

    Summation runs in ascending client id so the result does not depend on
    the order in which client work finished.
    """
    if not updates:
        raise ContractError("aggregate needs at least one client update")
    if mode not in AGG_MODES:
        raise ContractError(f"unknown aggregation mode {mode!r}")
    if update_option not in UPDATE_OPTIONS:
        raise ContractError(f"unknown update option {update_option!r}")
    ups = sorted(updates, key=lambda u: u.client_id)
    for u in ups:
        if u.kind != update_option:
            raise ContractError(f"client {u.client_id} sent {u.kind!r}, expected {update_option!r}")
        if u.payload.layout != theta.layout:
            raise ContractError(f"client {u.client_id} payload layout does not match the model")
    weights = aggregation_weights([u.n_samples for u in ups], mode)
    acc = weights[0] * ups[0].payload.values
    for w, u in zip(weights[1:], ups[1:]):
        acc += w * u.payload.values
    if update_option == "delta":
        return theta.replace(theta.values + eta_g * acc)
    return theta.replace(acc)


def aggregation_weights(sizes: Sequence[int], mode: str) -> list[float]:
    if mode == "weighted":
        total = sum(int(n) for n in sizes)
        return [int(n) / total for n in sizes]
    return [1 / len(sizes)] * len(sizes)


def client_update(
    objective, ds: Dataset, shard: ClientShard, theta: ParamVector, cfg: FedConfig, round_index: int,
) -> ClientUpdate:
    """E local epochs of mini-batch SGD starting from the global model."""
    values = theta.values
    losses = []
    step = 0
    for e in range(cfg.E):
        epoch = round_index * cfg.E + e
        for idx in minibatch_indices(shard, cfg.B, cfg.seed, epoch):
            values, loss = _sgd_step(objective, values, ds.batch(idx), cfg.eta_l, step)
            losses.append(loss)
            step += 1
    payload = values - theta.values if cfg.update_option == "delta" else values
    return ClientUpdate(
        shard.client_id, theta.replace(payload), len(shard), float(np.mean(losses)), cfg.update_option
    )


def fedavg_round(
    objective, ds: Dataset, shards: Sequence[ClientShard], theta: ParamVector,
    cfg: FedConfig, round_index: int, executor: Executor | None = None,
) -> RoundResult:
    shards = _ordered(shards)
    if len(shards) != cfg.K:
        raise ContractError(f"config says K={cfg.K} but {len(shards)} shards were given")
    chosen = [shards[i] for i in sample_participants(cfg.K, cfg.C_frac, cfg.seed, round_index)]

    def work(shard: ClientShard) -> ClientUpdate:
        try:
            return client_update(objective, ds, shard, theta, cfg, round_index)
        except DivergenceError as err:
            raise RoundError(
                f"client {shard.client_id} diverged in round {round_index}: {err}",
                round_index, shard.client_id,
            ) from err

    updates = list(executor.map(work, chosen)) if executor else [work(s) for s in chosen]
    new = aggregate(updates, cfg.agg_mode, cfg.update_option, theta, cfg.eta_g)
    return RoundResult(round_index, new, tuple(s.client_id for s in chosen), updates, theta)


def fedavg_run(
    objective, ds: Dataset, test_ds: Dataset | None, shards: Sequence[ClientShard], cfg: FedConfig,
    theta0: ParamVector | None = None, *, workers: int = 1, eval_batch: int = 1000,
    on_round: Callable | None = None, keep_rounds: bool = False,
) -> FedRun:
    """Run ``cfg.R`` rounds, computing :class:`RoundMetrics` after each one.

    ``on_round(metrics)`` is called as soon as a round finishes. If a round
    fails, the raised :class:`RoundError` carries the partial run in ``partial``.
    """
    from fedlab.diagnostics import round_metrics

    theta = _initial(objective, theta0, cfg.seed)
    run = FedRun(theta)
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(cfg.R):
            try:
                result = fedavg_round(objective, ds, shards, run.params, cfg, r, executor)
            except RoundError as err:
                err.partial = run
                raise
            metrics = round_metrics(objective, result, test_ds, eval_batch)
            run.params = result.params
            run.metrics.append(metrics)
            if keep_rounds:
                run.rounds.append(result)
            if on_round is not None:
                on_round(metrics)
    finally:
        if executor is not None:
            executor.shutdown()
    return run
