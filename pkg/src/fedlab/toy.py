"""Two-dimensional quadratic clients with closed-form optima.

Client ``k`` has loss ``f_k(theta) = 1/2 (theta - m_k)^T A_k (theta - m_k)``.
The average loss is minimized at ``(sum A_k)^-1 sum A_k m_k``, while
infinitely long local training followed by parameter averaging lands on
``mean(m_k)``. The two coincide when all ``A_k`` are equal, and the distance
between them is the drift gap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedlab.data import ClientShard, Dataset
from fedlab.errors import ConfigError, ContractError, DivergenceError
from fedlab.model import Batch, ParamVector
from fedlab.rng import stream


@dataclass(frozen=True, eq=False)
class QuadClient:
    A: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        m = np.array(self.m, dtype=np.float64)
        if A.shape != (2, 2) or m.shape != (2,):
            raise ConfigError("QuadClient needs a 2x2 matrix and a 2-vector")
        if A[0, 1] != A[1, 0]:
            raise ConfigError(f"A must be symmetric, got {A.tolist()}")
        # 2x2 SPD test: positive leading minor and determinant
        if not (A[0, 0] > 0 and A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0] > 0):
            raise ConfigError(f"A must be positive definite, got {A.tolist()}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "m", m)

    def loss(self, theta: np.ndarray) -> float:
        r = theta - self.m
        return 0.5 * float(r @ self.A @ r)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.A @ (theta - self.m)


@dataclass
class Trajectory:
    points: np.ndarray  # (steps + 1, 2)
    losses: np.ndarray  # (steps + 1,)

    def __len__(self) -> int:
        return len(self.losses)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "theta_x", "theta_y", "loss"])
            for t, (p, f) in enumerate(zip(self.points, self.losses)):
                w.writerow([t, repr(float(p[0])), repr(float(p[1])), repr(float(f))])


def mean_loss(clients: Sequence[QuadClient], theta: np.ndarray) -> float:
    return sum(c.loss(theta) for c in clients) / len(clients)


def mean_grad(clients: Sequence[QuadClient], theta: np.ndarray) -> np.ndarray:
    return sum(c.grad(theta) for c in clients) / len(clients)


def trace_descent(
    clients: Sequence[QuadClient], mode: str, theta0, eta: float, steps: int, seed: int,
    batch_size: int | None = None,
) -> Trajectory:
    """Descent path on the average loss.

    ``gd`` uses the exact mean gradient, ``sgd`` one uniformly drawn client
    per step, ``minibatch`` the mean over ``batch_size`` clients drawn
    without replacement. Recorded losses are always the average loss.
    """
    if not clients:
        raise ContractError("need at least one client")
    if mode not in ("gd", "sgd", "minibatch"):
        raise ConfigError(f"unknown descent mode {mode!r}")
    if mode == "minibatch" and not (batch_size and 1 <= batch_size <= len(clients)):
        raise ConfigError("minibatch mode needs 1 <= batch_size <= number of clients")
    rng = stream(seed, "toy-descent")
    theta = np.array(theta0, dtype=np.float64)
    points, losses = [theta.copy()], [mean_loss(clients, theta)]
    for t in range(steps):
        if mode == "gd":
            g = mean_grad(clients, theta)
        elif mode == "sgd":
            g = clients[int(rng.integers(len(clients)))].grad(theta)
        else:
            pick = rng.choice(len(clients), size=batch_size, replace=False)
            g = mean_grad([clients[i] for i in pick], theta)
        theta = theta - eta * g
        f = mean_loss(clients, theta)
        if not (np.all(np.isfinite(theta)) and math.isfinite(f)):
            raise DivergenceError(f"toy descent diverged at step {t}", last_finite=points[-1], step=t)
        points.append(theta.copy())
        losses.append(f)
    return Trajectory(np.array(points), np.array(losses))


def global_optimum(clients: Sequence[QuadClient]) -> np.ndarray:
    if not clients:
        raise ContractError("need at least one client")
    S = sum(c.A for c in clients)
    v = sum(c.A @ c.m for c in clients)
    # Cramer's rule on the 2x2 normal equations
    det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    return np.array([
        (v[0] * S[1, 1] - S[0, 1] * v[1]) / det,
        (S[0, 0] * v[1] - S[1, 0] * v[0]) / det,
    ])


def naive_parameter_average(clients: Sequence[QuadClient]) -> np.ndarray:
    if not clients:
        raise ContractError("need at least one client")
    return sum(c.m for c in clients) / len(clients)


def drift_gap(clients: Sequence[QuadClient]) -> float:
    return float(np.linalg.norm(naive_parameter_average(clients) - global_optimum(clients)))


class QuadraticObjective:
    """Adapter exposing quadratic clients to :mod:`fedlab.optim`.

    Each "sample" is one client: a batch's labels are client indices and the
    batch loss is the mean of those clients' quadratics.
    """

    layout = (("theta", 0, 2),)

    def __init__(self, clients: Sequence[QuadClient]):
        self.clients = list(clients)

    def loss_and_grad(self, values: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
        picked = [self.clients[int(i)] for i in batch.labels]
        return mean_loss(picked, values), mean_grad(picked, values)

    def params(self, theta) -> ParamVector:
        return ParamVector(np.array(theta, dtype=np.float64), self.layout)

    def dataset(self) -> Dataset:
        k = len(self.clients)
        return Dataset(np.zeros((k, 1)), np.arange(k), max(k, 2), "quadratic-clients")

    def shards(self) -> list[ClientShard]:
        return [ClientShard(k, np.array([k])) for k in range(len(self.clients))]


def local_sgd_paths(
    clients: Sequence[QuadClient], theta0, eta: float, I: int, syncs: int,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Local GD with periodic averaging, recording every client's path.

    Returns the global model after each sync (``syncs + 1`` rows) and, per
    client, the concatenated local iterates. This mirrors
    :func:`fedlab.optim.local_sgd_run` on a one-sample-per-client dataset but
    keeps the intermediate points for plotting.
    """
    theta = np.array(theta0, dtype=np.float64)
    globals_ = [theta.copy()]
    paths = [[theta.copy()] for _ in clients]
    for _ in range(syncs):
        ends = []
        for k, c in enumerate(clients):
            local = theta
            for _ in range(I):
                local = local - eta * c.grad(local)
                paths[k].append(local.copy())
            ends.append(local)
        acc = ends[0].copy()
        for e in ends[1:]:
            acc += e
        theta = acc / len(clients)
        globals_.append(theta.copy())
    return np.array(globals_), [np.array(p) for p in paths]
