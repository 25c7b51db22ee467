"""Server-side evaluation and the client-drift instruments.

Round records carry the test metrics, each participant's local training
loss, and the per-layer mean pairwise cosine similarity of the
participants' updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from fedlab.errors import ContractError
from fedlab.model import ModelSpec, ParamVector


@dataclass(frozen=True)
class SimilarityRecord:
    round: int
    layer: str
    mean_cos: float  # nan when every pair was excluded
    pair_count: int
    excluded_pairs: int


@dataclass
class RoundMetrics:
    round: int
    test_acc: float
    test_loss: float
    train_loss_mean: float
    per_client_losses: dict[int, float]
    participants: tuple[int, ...]
    similarity: list[SimilarityRecord] = field(default_factory=list)

    @property
    def cosine_by_layer(self) -> dict[str, float]:
        return {s.layer: s.mean_cos for s in self.similarity}

    def mean_cosine(self) -> float:
        """Mean over layers of the per-layer pair-averaged cosine."""
        vals = [s.mean_cos for s in self.similarity if not math.isnan(s.mean_cos)]
        return float(np.mean(vals)) if vals else float("nan")


def evaluate_global(spec: ModelSpec, params: ParamVector, test_ds, eval_batch: int = 1000) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy over the whole test set.

    Per-sample losses are summed in dataset order with a single running
    float64 accumulator, so ``eval_batch`` only bounds memory.
    """
    n = len(test_ds)
    if n == 0:
        raise ContractError("test set is empty")
    if eval_batch < 1:
        raise ContractError("eval_batch must be >= 1")
    losses = np.empty(n)
    correct = 0
    for start in range(0, n, eval_batch):
        batch = test_ds.batch(np.arange(start, min(start + eval_batch, n)))
        logits = spec.logits(params.values, batch.features)
        correct += int(np.sum(logits.argmax(axis=1) == batch.labels))
        losses[start : start + len(batch)] = _xent_rows(logits, batch.labels)
    return correct / n, float(math.fsum(losses) / n)


def _xent_rows(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(labels.size), labels]


def pairwise_cosine(updates: Sequence, layout, round_index: int = 0) -> list[SimilarityRecord]:
    """Per layer, the mean cosine similarity over all unordered pairs of updates.

    Pairs where either segment has zero norm are left out of the mean and
    counted in ``excluded_pairs``.
    """
    if len(updates) < 2:
        raise ContractError("pairwise cosine needs at least two updates")
    layout = tuple(layout)
    for u in updates:
        if getattr(u, "kind", "delta") != "delta":
            raise ContractError(
                f"client {u.client_id} sent parameters, not an update; convert to deltas first"
            )
        if tuple(u.payload.layout) != layout:
            raise ContractError(f"client {u.client_id} payload layout does not match")
    ordered = sorted(updates, key=lambda u: u.client_id)
    records = []
    for name, start, length in layout:
        segs = [np.asarray(u.payload.values[start : start + length], dtype=np.float64) for u in ordered]
        norms = [float(np.linalg.norm(s)) for s in segs]
        total, used, excluded = 0.0, 0, 0
        for i, j in combinations(range(len(segs)), 2):
            if norms[i] == 0.0 or norms[j] == 0.0:
                excluded += 1
                continue
            c = float(np.dot(segs[i], segs[j])) / (norms[i] * norms[j])
            total += min(1.0, max(-1.0, c))
            used += 1
        mean = total / used if used else float("nan")
        pairs = len(segs) * (len(segs) - 1) // 2
        records.append(SimilarityRecord(round_index, name, mean, pairs, excluded))
    return records


def overfit_round(test_losses: Sequence[float]) -> int:
    """1-indexed round of minimum test loss; the earliest wins ties."""
    if len(test_losses) == 0:
        raise ContractError("empty test-loss series")
    return int(np.argmin(np.asarray(test_losses, dtype=np.float64))) + 1


def loss_traces(history: Sequence[RoundMetrics], clients: Sequence[int] | None = None) -> dict[int, list]:
    """Per-client training-loss series; rounds a client sat out are ``None``."""
    if clients is None:
        clients = sorted({c for m in history for c in m.per_client_losses})
    return {c: [m.per_client_losses.get(c) for m in history] for c in clients}


def loss_dispersion(history: Sequence[RoundMetrics]) -> list[float]:
    """Population standard deviation of participant losses, per round."""
    out = []
    for m in history:
        vals = list(m.per_client_losses.values())
        out.append(float(np.std(vals)) if vals else float("nan"))
    return out


def round_metrics(objective, result, test_ds, eval_batch: int = 1000) -> RoundMetrics:
    if test_ds is not None and isinstance(objective, ModelSpec):
        acc, tloss = evaluate_global(objective, result.params, test_ds, eval_batch)
    else:
        acc, tloss = float("nan"), float("nan")
    per_client = {u.client_id: u.train_loss for u in sorted(result.updates, key=lambda u: u.client_id)}
    train_mean = float(np.mean(list(per_client.values())))
    sims = []
    if len(result.updates) >= 2:
        sims = pairwise_cosine(result.deltas(), result.params.layout, result.round + 1)
    return RoundMetrics(result.round + 1, acc, tloss, train_mean, per_client, tuple(result.participants), sims)

