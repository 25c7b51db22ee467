"""Flat ``key=value`` experiment configs.

One pair per line, ``#`` starts a comment. Which keys are legal depends on
the chosen ``dataset``, ``model`` and ``partition``: ``alpha`` exists only
for ``partition=dirichlet``, ``hidden`` only for ``model=mlp`` and so on.
Unknown or inapplicable keys are errors.

Defaults::

    eta_g=1  C_frac=1  agg=weighted  option=I  I=1  seeds=0
    eval_batch=1000  output_dir=out  hidden=64,64
    n=2000  n_test=1000  dim=32  classes=10  spread=0.4  data_seed=0

Sweeps are written as ``variant.<label>=key:value key:value``; each variant
is the base config with those overrides applied. ``match_u=true`` asks the
loader to verify that all variants share one effective update amount.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable

from fedlab.errors import ConfigError
from fedlab.optim import FedConfig, effective_update_amount

DATASETS = ("synth", "cifar10")
MODELS = ("logistic", "mlp", "paper_cnn")
PARTITIONS = ("iid", "sgm", "dirichlet")
OPTIONS = {"I": "delta", "II": "params"}
CIFAR_TRAIN_SIZE = 50_000

_LABEL = re.compile(r"[A-Za-z0-9_-]+")

REQUIRED = ("dataset", "model", "partition", "K", "E", "B", "eta_l", "R")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    model: str
    partition: str
    K: int
    E: int
    B: int
    eta_l: float
    R: int
    eta_g: float = 1.0
    C_frac: float = 1.0
    I: int = 1
    agg: str = "weighted"
    option: str = "I"
    seeds: tuple[int, ...] = (0,)
    eval_batch: int = 1000
    output_dir: str = "out"
    name: str = "experiment"
    hidden: tuple[int, ...] | None = None
    alpha: float | None = None
    sgm: float | None = None
    cifar_path: str | None = None
    n: int | None = None
    n_test: int | None = None
    dim: int | None = None
    classes: int | None = None
    spread: float | None = None
    data_seed: int | None = None
    match_u: bool = False
    variants: tuple[tuple[str, tuple[tuple[str, str], ...]], ...] = field(default=())

    @property
    def repeats(self) -> int:
        return len(self.seeds)

    @property
    def train_size(self) -> int:
        return self.n if self.dataset == "synth" else CIFAR_TRAIN_SIZE

    def fed_config(self, seed: int) -> FedConfig:
        return FedConfig(
            eta_l=self.eta_l, B=self.B, E=self.E, K=self.K, R=self.R, eta_g=self.eta_g,
            C_frac=self.C_frac, I=self.I, agg_mode=self.agg, update_option=OPTIONS[self.option],
            seed=seed,
        )

    def effective_update(self):
        return effective_update_amount(self.eta_l, self.E, self.train_size, self.B, self.K)

    def resolved(self) -> list[tuple[str, "ExperimentConfig"]]:
        """(label, config) pairs with every variant's overrides applied."""
        if not self.variants:
            return [("main", self)]
        base = _pairs(self)
        base.pop("match_u", None)
        out = []
        for label, overrides in self.variants:
            merged = dict(base)
            for k, v in overrides:
                merged[k] = v
            merged = _drop_inapplicable(merged, {k for k, _ in overrides})
            text = "\n".join(f"{k}={v}" for k, v in merged.items())
            out.append((label, parse_config(text)))
        return out


# key -> (parser, formatter, applicability predicate on (dataset, model, partition))
def _always(d, m, p):
    return True


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    v = float(s)
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError(s)
    return v


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(s)


def _choice(options) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    return parse


_fmt_float = repr


def _fmt_ints(v) -> str:
    return ",".join(str(x) for x in v)


SCHEMA: dict[str, tuple[Callable, Callable, Callable]] = {
    "name": (str, str, _always),
    "dataset": (_choice(DATASETS), str, _always),
    "model": (_choice(MODELS), str, _always),
    "partition": (_choice(PARTITIONS), str, _always),
    "K": (_int, str, _always),
    "E": (_int, str, _always),
    "B": (_int, str, _always),
    "eta_l": (_float, _fmt_float, _always),
    "R": (_int, str, _always),
    "eta_g": (_float, _fmt_float, _always),
    "C_frac": (_float, _fmt_float, _always),
    "I": (_int, str, _always),
    "agg": (_choice(("weighted", "naive")), str, _always),
    "option": (_choice(tuple(OPTIONS)), str, _always),
    "seeds": (_ints, _fmt_ints, _always),
    "eval_batch": (_int, str, _always),
    "output_dir": (str, str, _always),
    "match_u": (_bool, lambda v: "true" if v else "false", _always),
    "hidden": (_ints, _fmt_ints, lambda d, m, p: m == "mlp"),
    "alpha": (_float, _fmt_float, lambda d, m, p: p == "dirichlet"),
    "sgm": (_float, _fmt_float, lambda d, m, p: p == "sgm"),
    "cifar_path": (str, str, lambda d, m, p: d == "cifar10"),
    "n": (_int, str, lambda d, m, p: d == "synth"),
    "n_test": (_int, str, lambda d, m, p: d == "synth"),
    "dim": (_int, str, lambda d, m, p: d == "synth"),
    "classes": (_int, str, lambda d, m, p: d == "synth"),
    "spread": (_float, _fmt_float, lambda d, m, p: d == "synth"),
    "data_seed": (_int, str, lambda d, m, p: d == "synth"),
}

CONDITIONAL_DEFAULTS = {
    "hidden": (64, 64),
    "n": 2000,
    "n_test": 1000,
    "dim": 32,
    "classes": 10,
    "spread": 0.4,
    "data_seed": 0,
}
CONDITIONAL_REQUIRED = {"alpha", "sgm", "cifar_path"}


def _applicable(key: str, d: str, m: str, p: str) -> bool:
    return SCHEMA[key][2](d, m, p)


def parse_config(text: str) -> ExperimentConfig:
    raw: dict[str, tuple[str, int]] = {}
    variants: list[tuple[str, tuple[tuple[str, str], ...]]] = []
    repeats: tuple[int, int] | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw or (key == "repeats" and repeats is not None):
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        if key.startswith("variant."):
            label = key[len("variant."):]
            if not _LABEL.fullmatch(label):
                raise ConfigError(f"variant label {label!r} may only use letters, digits, _ and -", line=lineno)
            variants.append((label, _parse_overrides(value, lineno)))
            continue
        if key == "repeats":
            try:
                repeats = (int(value), lineno)
            except ValueError:
                raise ConfigError(f"repeats expects an integer, got {value!r}", line=lineno)
            continue
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        raw[key] = (value, lineno)

    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    values: dict[str, Any] = {}
    for key in ("dataset", "model", "partition"):
        values[key] = _convert(key, *raw[key])
    d, m, p = values["dataset"], values["model"], values["partition"]
    for key, (value, lineno) in raw.items():
        if key in values:
            continue
        if not _applicable(key, d, m, p):
            raise ConfigError(f"unknown key {key!r} for dataset={d}, model={m}, partition={p}", line=lineno)
        values[key] = _convert(key, value, lineno)

    missing = [k for k in sorted(CONDITIONAL_REQUIRED) if _applicable(k, d, m, p) and k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    for key, default in CONDITIONAL_DEFAULTS.items():
        if _applicable(key, d, m, p):
            values.setdefault(key, default)

    if repeats is not None:
        count, lineno = repeats
        if "seeds" in values and len(values["seeds"]) != count:
            raise ConfigError(f"repeats={count} but {len(values['seeds'])} seeds listed", line=lineno)
        values.setdefault("seeds", tuple(range(count)))
    labels = [v[0] for v in variants]
    if len(set(labels)) != len(labels):
        raise ConfigError("duplicate variant label")
    values["variants"] = tuple(variants)

    cfg = ExperimentConfig(**values)
    validate(cfg)
    if cfg.variants:
        resolved = cfg.resolved()
        if cfg.match_u:
            amounts = {label: c.effective_update() for label, c in resolved}
            if len(set(amounts.values())) != 1:
                detail = ", ".join(f"{k}={float(v):g}" for k, v in amounts.items())
                raise ConfigError(f"match_u is set but variants differ in effective update: {detail}")
    return cfg


def _convert(key: str, value: str, lineno: int):
    parser = SCHEMA[key][0]
    try:
        return parser(value)
    except ValueError as err:
        raise ConfigError(f"bad value {value!r} for {key}: {err}", line=lineno) from None


def _parse_overrides(value: str, lineno: int) -> tuple[tuple[str, str], ...]:
    out = []
    for token in value.split():
        if ":" not in token:
            raise ConfigError(f"variant override {token!r} must look like key:value", line=lineno)
        k, v = token.split(":", 1)
        if k not in SCHEMA or k in ("variants", "match_u"):
            raise ConfigError(f"unknown key {k!r} in variant", line=lineno)
        out.append((k, v))
    return tuple(out)


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    if any(s < 0 for s in cfg.seeds):
        raise ConfigError("seeds must be non-negative")
    if cfg.eval_batch < 1:
        raise ConfigError("eval_batch must be >= 1")
    cfg.fed_config(cfg.seeds[0])
    if cfg.partition == "dirichlet" and not cfg.alpha > 0:
        raise ConfigError("alpha must be > 0")
    if cfg.partition == "sgm" and cfg.sgm < 0:
        raise ConfigError("sgm must be >= 0")
    if cfg.model == "mlp" and (not cfg.hidden or min(cfg.hidden) < 1):
        raise ConfigError("hidden must list positive layer widths")
    if cfg.dataset == "synth":
        if cfg.classes < 2 or cfg.dim < 1 or cfg.n < cfg.classes or cfg.n_test < 1 or cfg.spread < 0:
            raise ConfigError("synth dataset needs classes >= 2, dim >= 1, n >= classes, n_test >= 1, spread >= 0")
        if cfg.model == "paper_cnn":
            raise ConfigError("paper_cnn needs image data; use dataset=cifar10")
        if cfg.K > cfg.n:
            raise ConfigError(f"K={cfg.K} exceeds n={cfg.n}")


def _pairs(cfg: ExperimentConfig) -> dict[str, str]:
    d, m, p = cfg.dataset, cfg.model, cfg.partition
    out = {}
    for f in fields(cfg):
        key = f.name
        if key == "variants":
            continue
        if not _applicable(key, d, m, p):
            continue
        value = getattr(cfg, key)
        if value is None:
            continue
        out[key] = SCHEMA[key][1](value)
    return out


def _drop_inapplicable(pairs: dict[str, str], keep: set[str]) -> dict[str, str]:
    # A variant may switch partition/model/dataset; base keys that no longer
    # apply are dropped, explicit overrides are kept (and validated).
    d, m, p = pairs["dataset"], pairs["model"], pairs["partition"]
    return {k: v for k, v in pairs.items() if k in keep or _applicable(k, d, m, p)}


def render_config(cfg: ExperimentConfig) -> str:
    lines = [f"{k}={v}" for k, v in _pairs(cfg).items()]
    for label, overrides in cfg.variants:
        lines.append(f"variant.{label}=" + " ".join(f"{k}:{v}" for k, v in overrides))
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    new = replace(cfg, **changes)
    validate(new)
    return new
