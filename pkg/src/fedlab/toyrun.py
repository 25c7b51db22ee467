"""Config and runner for the 2-D toy landscapes.

Toy configs use the same ``key=value`` format as experiments::

    toy=fig8
    eta=0.1
    I=50
    syncs=20
    theta0=3,-1
    client.0.A=1,0,0,4     # row-major 2x2
    client.0.m=0,0
    client.1.A=4,0,0,1
    client.1.m=2,2

``fig1`` writes one descent trajectory per mode (gd, sgd, minibatch).
``fig8`` runs local GD with periodic averaging on the configured clients
and on a copy whose Hessians are all replaced by their mean, and reports
the drift gap of both.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedlab.errors import ConfigError
from fedlab.toy import (
    QuadClient, Trajectory, drift_gap, global_optimum, local_sgd_paths, mean_loss,
    naive_parameter_average, trace_descent,
)

_CLIENT_KEY = re.compile(r"^client\.(\d+)\.(A|m)$")


@dataclass(frozen=True)
class ToyConfig:
    toy: str
    clients: tuple[tuple[tuple[float, ...], tuple[float, ...]], ...]
    theta0: tuple[float, float]
    eta: float
    steps: int = 50
    batch_size: int = 2
    I: int = 20
    syncs: int = 10
    seed: int = 0
    output_dir: str = "out"

    def quad_clients(self) -> list[QuadClient]:
        return [QuadClient(np.reshape(a, (2, 2)), m) for a, m in self.clients]


_SCALARS = {
    "eta": float, "steps": int, "batch_size": int, "I": int, "syncs": int, "seed": int,
    "output_dir": str,
}


def _floats(value: str, count: int, key: str, lineno: int) -> tuple[float, ...]:
    try:
        out = tuple(float(x) for x in value.split(","))
    except ValueError:
        raise ConfigError(f"{key} expects {count} comma-separated numbers", line=lineno) from None
    if len(out) != count:
        raise ConfigError(f"{key} expects {count} numbers, got {len(out)}", line=lineno)
    return out


def parse_toy_config(text: str) -> ToyConfig:
    values: dict = {}
    clients: dict[int, dict[str, tuple]] = {}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        seen.add(key)
        match = _CLIENT_KEY.match(key)
        if match:
            idx, part = int(match.group(1)), match.group(2)
            clients.setdefault(idx, {})[part] = _floats(value, 4 if part == "A" else 2, key, lineno)
        elif key == "toy":
            if value not in ("fig1", "fig8"):
                raise ConfigError(f"toy must be fig1 or fig8, got {value!r}", line=lineno)
            values["toy"] = value
        elif key == "theta0":
            values["theta0"] = _floats(value, 2, key, lineno)
        elif key in _SCALARS:
            try:
                values[key] = _SCALARS[key](value)
            except ValueError:
                raise ConfigError(f"bad value {value!r} for {key}", line=lineno) from None
        else:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
    missing = [k for k in ("toy", "eta", "theta0") if k not in values]
    if not clients:
        missing.append("client.0.A")
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    if sorted(clients) != list(range(len(clients))):
        raise ConfigError("clients must be numbered 0, 1, 2, ... without gaps")
    pairs = []
    for i in range(len(clients)):
        c = clients[i]
        if "A" not in c or "m" not in c:
            raise ConfigError(f"client {i} needs both A and m")
        pairs.append((c["A"], c["m"]))
    cfg = ToyConfig(clients=tuple(pairs), **values)
    cfg.quad_clients()  # validates symmetry and definiteness
    if cfg.eta <= 0 or cfg.steps < 1 or cfg.I < 1 or cfg.syncs < 1:
        raise ConfigError("eta, steps, I and syncs must be positive")
    if not 1 <= cfg.batch_size <= len(pairs):
        raise ConfigError("batch_size must be between 1 and the number of clients")
    return cfg


def render_toy_config(cfg: ToyConfig) -> str:
    lines = [f"toy={cfg.toy}", f"eta={cfg.eta!r}", f"theta0={cfg.theta0[0]!r},{cfg.theta0[1]!r}"]
    for key in ("steps", "batch_size", "I", "syncs", "seed", "output_dir"):
        lines.append(f"{key}={getattr(cfg, key)}")
    for i, (a, m) in enumerate(cfg.clients):
        lines.append(f"client.{i}.A=" + ",".join(repr(x) for x in a))
        lines.append(f"client.{i}.m=" + ",".join(repr(x) for x in m))
    return "\n".join(lines) + "\n"


def _path_trajectory(points: np.ndarray, loss_fn) -> Trajectory:
    return Trajectory(points, np.array([loss_fn(p) for p in points]))


def run_toy(cfg: ToyConfig, out_dir=None) -> dict:
    """Write trajectory CSVs plus ``summary.json``; returns the summary."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    clients = cfg.quad_clients()
    summary: dict = {"toy": cfg.toy}
    if cfg.toy == "fig1":
        for mode in ("gd", "sgd", "minibatch"):
            traj = trace_descent(clients, mode, cfg.theta0, cfg.eta, cfg.steps, cfg.seed, cfg.batch_size)
            traj.write_csv(out / f"trajectory_{mode}.csv")
            summary[mode] = {"final": traj.points[-1].tolist(), "final_loss": float(traj.losses[-1])}
        summary["optimum"] = global_optimum(clients).tolist()
    else:
        mean_A = sum(c.A for c in clients) / len(clients)
        scenarios = {"noniid": clients, "iid": [QuadClient(mean_A, c.m) for c in clients]}
        for name, group in scenarios.items():
            globals_, paths = local_sgd_paths(group, cfg.theta0, cfg.eta, cfg.I, cfg.syncs)
            _path_trajectory(globals_, lambda p: mean_loss(group, p)).write_csv(out / f"global_{name}.csv")
            for k, path in enumerate(paths):
                _path_trajectory(path, group[k].loss).write_csv(out / f"client{k}_{name}.csv")
            summary[name] = {
                "optimum": global_optimum(group).tolist(),
                "naive_average": naive_parameter_average(group).tolist(),
                "drift_gap": drift_gap(group),
                "final_global": globals_[-1].tolist(),
            }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
